#pragma once

// N-way K-shot episode data model, episode sampling, and the synthetic
// misaligned-sequence generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/errors.hpp"
#include "tsamlt/tensor.hpp"

namespace tsamlt::episodes {

/// One video as an M×D_in matrix of per-frame features.
struct EmbeddingSequence {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // row-major frames × dim
  std::string video_id;
  std::size_t class_id = 0;

  tensor::Tensor as_tensor() const { return tensor::Tensor({frames, dim}, values); }
};

struct Dataset {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<EmbeddingSequence> videos;
  std::vector<std::string> class_names;  // indexed by dense class id

  std::size_t class_count() const { return class_names.size(); }

  std::vector<std::vector<std::size_t>> videos_by_class() const {
    std::vector<std::vector<std::size_t>> out(class_count());
    for (std::size_t i = 0; i < videos.size(); ++i) out.at(videos[i].class_id).push_back(i);
    return out;
  }

  /// Throws ConfigError unless every sequence is finite and shares M, D_in.
  void validate() const {
    if (frames < 2) throw ConfigError("dataset: sequences need at least 2 frames");
    if (dim < 1) throw ConfigError("dataset: feature dimension must be >= 1");
    for (const auto& v : videos) {
      if (v.frames != frames || v.dim != dim || v.values.size() != frames * dim) {
        throw ConfigError("dataset: video " + v.video_id + " has inconsistent extents");
      }
      if (v.class_id >= class_count()) {
        throw ConfigError("dataset: video " + v.video_id + " has unknown class");
      }
      for (double x : v.values) {
        if (!std::isfinite(x)) throw ConfigError("dataset: non-finite value in " + v.video_id);
      }
    }
  }
};

struct Query {
  EmbeddingSequence sequence;
  std::size_t label = 0;  // episode-local class index in [0, way)
};

struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::vector<std::vector<EmbeddingSequence>> support;  // [way][shot]
  std::vector<Query> queries;
  std::vector<std::size_t> dataset_classes;  // episode label -> dataset class id

  std::size_t video_count() const { return way * shot + queries.size(); }
};

/// Queries assigned to each episode class: P is spread round-robin, the
/// first P mod N classes receive one extra.
inline std::vector<std::size_t> queries_per_class(std::size_t way, std::size_t n_query) {
  std::vector<std::size_t> q(way, n_query / way);
  for (std::size_t c = 0; c < n_query % way; ++c) ++q[c];
  return q;
}

/// Draws an N-way K-shot episode with P queries, without replacement.
inline Episode sample_episode(const Dataset& data, std::size_t way, std::size_t shot,
                              std::size_t n_query, std::mt19937_64& rng) {
  if (way < 1 || shot < 1) throw ConfigError("episode: way and shot must be positive");
  const auto per_class = queries_per_class(way, n_query);
  const std::size_t needed = shot + std::max<std::size_t>(1, per_class.front());
  const auto by_class = data.videos_by_class();
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() >= needed) eligible.push_back(c);
  }
  if (eligible.size() < way) {
    throw ConfigError("episode: need " + std::to_string(way) + " classes with >= " +
                      std::to_string(needed) + " videos, dataset has " +
                      std::to_string(eligible.size()));
  }
  // Partial Fisher-Yates over eligible classes.
  for (std::size_t i = 0; i < way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.support.resize(way);
  for (std::size_t c = 0; c < way; ++c) {
    const std::size_t cls = eligible[c];
    ep.dataset_classes.push_back(cls);
    std::vector<std::size_t> pool = by_class[cls];
    const std::size_t take = shot + per_class[c];
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    for (std::size_t i = 0; i < shot; ++i) ep.support[c].push_back(data.videos[pool[i]]);
    for (std::size_t i = shot; i < take; ++i) ep.queries.push_back({data.videos[pool[i]], c});
  }
  std::shuffle(ep.queries.begin(), ep.queries.end(), rng);
  return ep;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t videos_per_class = 20;
  std::size_t core_length = 6;
  std::size_t pad_min = 1;
  std::size_t pad_max = 3;
  double noise = 0.1;
  std::size_t dim = 64;
  std::size_t frames = 8;
  std::size_t distractor_pool = 32;
  double distractor_scale = 1.0;
  bool shared_template = false;  // every class uses the same template
  std::uint64_t seed = 1;

  void validate() const {
    if (classes < 1) throw ConfigError("synthetic: need at least one class");
    if (videos_per_class < 1) throw ConfigError("synthetic: need at least one video per class");
    if (core_length < 1) throw ConfigError("synthetic: core length must be >= 1");
    if (pad_min > pad_max) throw ConfigError("synthetic: pad_min > pad_max");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic: noise must be >= 0");
    if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
    if (frames < 2) throw ConfigError("synthetic: frames must be >= 2");
    if (pad_max > 0 && distractor_pool < 1) throw ConfigError("synthetic: empty distractor pool");
    if (!(distractor_scale >= 0.0)) throw ConfigError("synthetic: distractor scale must be >= 0");
  }
};

/// Where the class core sits inside one generated video before resampling.
struct SyntheticLayout {
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t raw_length = 0;
};

struct SyntheticData {
  Dataset dataset;
  std::vector<SyntheticLayout> layouts;           // parallel to dataset.videos
  std::vector<std::vector<double>> templates;     // [class] core_length × dim
};

/// Linear resampling of a [L×D] sequence to `frames` rows with endpoints
/// aligned: output row t reads source position t·(L-1)/(frames-1).
inline std::vector<double> resample_time(const std::vector<double>& raw, std::size_t length,
                                         std::size_t dim, std::size_t frames) {
  std::vector<double> out(frames * dim);
  for (std::size_t t = 0; t < frames; ++t) {
    const double pos = length == 1 ? 0.0
                                   : static_cast<double>(t) * static_cast<double>(length - 1) /
                                         static_cast<double>(frames - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), length - 1);
    const std::size_t hi = std::min(lo + 1, length - 1);
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t d = 0; d < dim; ++d) {
      out[t * dim + d] = (1.0 - frac) * raw[lo * dim + d] + frac * raw[hi * dim + d];
    }
  }
  return out;
}

/// Each class owns a fixed template; a video is the template plus Gaussian
/// noise, padded on both sides with frames from a class-independent
/// distractor pool, then resampled to exactly `frames` rows.
inline SyntheticData gen_synthetic_detailed(const SyntheticSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const std::size_t d = spec.dim;
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<double> pool(spec.distractor_pool * d);
  for (auto& x : pool) x = spec.distractor_scale * unit(rng);

  SyntheticData out;
  out.templates.resize(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    if (spec.shared_template && c > 0) {
      out.templates[c] = out.templates[0];
      continue;
    }
    out.templates[c].resize(spec.core_length * d);
    for (auto& x : out.templates[c]) x = unit(rng);
  }

  Dataset& ds = out.dataset;
  ds.frames = spec.frames;
  ds.dim = d;
  for (std::size_t c = 0; c < spec.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));

  std::uniform_int_distribution<std::size_t> pad(spec.pad_min, spec.pad_max);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t v = 0; v < spec.videos_per_class; ++v) {
      SyntheticLayout layout;
      layout.pad_left = pad(rng);
      layout.pad_right = pad(rng);
      layout.raw_length = layout.pad_left + spec.core_length + layout.pad_right;
      std::vector<double> raw(layout.raw_length * d);
      auto put_distractor = [&](std::size_t row) {
        std::uniform_int_distribution<std::size_t> which(0, spec.distractor_pool - 1);
        const std::size_t p = which(rng);
        std::copy_n(pool.begin() + static_cast<std::ptrdiff_t>(p * d), d,
                    raw.begin() + static_cast<std::ptrdiff_t>(row * d));
      };
      for (std::size_t r = 0; r < layout.pad_left; ++r) put_distractor(r);
      for (std::size_t r = 0; r < spec.core_length; ++r) {
        for (std::size_t k = 0; k < d; ++k) {
          raw[(layout.pad_left + r) * d + k] =
              out.templates[c][r * d + k] + (spec.noise > 0.0 ? spec.noise * unit(rng) : 0.0);
        }
      }
      for (std::size_t r = 0; r < layout.pad_right; ++r) {
        put_distractor(layout.pad_left + spec.core_length + r);
      }
      EmbeddingSequence seq;
      seq.frames = spec.frames;
      seq.dim = d;
      seq.values = resample_time(raw, layout.raw_length, d, spec.frames);
      seq.video_id = "c" + std::to_string(c) + "_v" + std::to_string(v);
      seq.class_id = c;
      ds.videos.push_back(std::move(seq));
      out.layouts.push_back(layout);
    }
  }
  return out;
}

inline Dataset gen_synthetic(const SyntheticSpec& spec, std::mt19937_64& rng) {
  return gen_synthetic_detailed(spec, rng).dataset;
}

inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  return gen_synthetic(spec, rng);
}

}  // namespace tsamlt::episodes
