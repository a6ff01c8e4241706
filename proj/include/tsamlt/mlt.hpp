#pragma once

// Multiple-level transformer: frame tuples of several cardinalities are
// mean-pooled, reduced to a few learned tuple representations per level,
// projected by one shared set of key/query/value maps, and attended to
// build a query-specific prototype for each class.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/nn.hpp"
#include "tsamlt/ops.hpp"

namespace tsamlt::mlt {

using tensor::Shape;
using tensor::Tensor;

/// Frame indices (1-based, strictly increasing) of one tuple.
using TupleIndex = std::vector<std::size_t>;

inline std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// All C(M, w) tuples in lexicographic order.
inline std::vector<TupleIndex> enumerate_tuples(std::size_t frames, std::size_t w) {
  if (w < 1 || w > frames) {
    throw ConfigError("enumerate_tuples: cardinality " + std::to_string(w) +
                      " outside [1, " + std::to_string(frames) + "]");
  }
  std::vector<TupleIndex> out;
  TupleIndex cur(w);
  for (std::size_t i = 0; i < w; ++i) cur[i] = i + 1;
  while (true) {
    out.push_back(cur);
    std::size_t i = w;
    while (i > 0 && cur[i - 1] == frames - w + i) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < w; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

/// Cardinalities in use (ascending) and the tuple-representation count of each.
struct CardinalityConfig {
  std::vector<std::size_t> cardinalities{1, 2, 3, 4};
  std::vector<std::size_t> tuple_reps{8, 4, 3, 2};

  void validate(std::size_t frames) const {
    if (cardinalities.empty()) throw ConfigError("mlt: no cardinalities");
    if (cardinalities.size() != tuple_reps.size()) {
      throw ConfigError("mlt: cardinalities and tuple_reps differ in length");
    }
    for (std::size_t i = 0; i < cardinalities.size(); ++i) {
      const std::size_t w = cardinalities[i];
      if (w < 1 || w > frames) {
        throw ConfigError("mlt: cardinality " + std::to_string(w) + " outside [1, M]");
      }
      if (i > 0 && w <= cardinalities[i - 1]) {
        throw ConfigError("mlt: cardinalities must be strictly ascending");
      }
      if (tuple_reps[i] < 1 || tuple_reps[i] > binomial(frames, w)) {
        throw ConfigError("mlt: tuple_reps for w=" + std::to_string(w) + " must be in [1, C(M,w)]");
      }
    }
  }

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (auto r : tuple_reps) n += r;
    return n;
  }

  /// Row offsets of each level block; size is |Ω| + 1.
  std::vector<std::size_t> block_offsets() const {
    std::vector<std::size_t> off{0};
    for (auto r : tuple_reps) off.push_back(off.back() + r);
    return off;
  }
};

struct MltConfig {
  CardinalityConfig levels;
  std::size_t dim_model = 128;
  std::size_t dim_k = 64;
  std::size_t dim_v = 64;
  bool positional_encoding = true;
};

/// Concatenated tuple representations, blocks ascending in cardinality.
struct MultiLevelRep {
  Tensor rows;                       // (ΣN̂_w) × dim
  std::vector<std::size_t> offsets;  // block boundaries, |Ω| + 1 entries
  std::vector<std::size_t> cardinalities;
};

/// Sinusoidal encoding of absolute frame positions 1..M into `dim` channels.
inline Tensor positional_encoding(std::size_t frames, std::size_t dim) {
  std::vector<double> pe(frames * dim);
  for (std::size_t t = 0; t < frames; ++t) {
    const double pos = static_cast<double>(t + 1);
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(i - i % 2) / static_cast<double>(dim));
      pe[t * dim + i] = i % 2 == 0 ? std::sin(pos / rate) : std::cos(pos / rate);
    }
  }
  return Tensor({frames, dim}, std::move(pe));
}

/// [C(M,w) × M] matrix whose row r averages the frames of tuple r.
inline Tensor tuple_average_matrix(std::size_t frames, std::size_t w) {
  const auto tuples = enumerate_tuples(frames, w);
  std::vector<double> a(tuples.size() * frames, 0.0);
  for (std::size_t r = 0; r < tuples.size(); ++r)
    for (std::size_t idx : tuples[r]) a[r * frames + (idx - 1)] = 1.0 / static_cast<double>(w);
  return Tensor({tuples.size(), frames}, std::move(a));
}

/// Scaled dot-product attention over layer-normalized rows:
/// softmax(q·kᵀ / sqrt(d_k)) along `axis` (1 = per query row).
inline Tensor attention_from_normalized(const Tensor& query_norm, const Tensor& keys_norm,
                                        std::size_t axis = 1) {
  if (keys_norm.rank() != 2 || keys_norm.dim(0) == 0) {
    throw ShapeError("attention: empty support");
  }
  if (query_norm.dim(1) != keys_norm.dim(1)) throw ShapeError("attention: d_k mismatch");
  const double inv = 1.0 / std::sqrt(static_cast<double>(query_norm.dim(1)));
  return tensor::softmax(tensor::scale(tensor::matmul(query_norm, tensor::transpose(keys_norm)), inv),
                         axis);
}

/// t_p^c = scores · values: each prototype row is a convex combination of the
/// class's support value rows.
inline Tensor prototype(const Tensor& scores, const Tensor& support_values) {
  if (scores.dim(1) != support_values.dim(0)) {
    throw ShapeError("prototype: score columns " + std::to_string(scores.dim(1)) +
                     " != support value rows " + std::to_string(support_values.dim(0)));
  }
  return tensor::matmul(scores, support_values);
}

class MultipleLevelTransformer {
 public:
  MultipleLevelTransformer() = default;
  MultipleLevelTransformer(nn::ParamStore& store, std::size_t frames, std::size_t dim_in,
                           const MltConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg), frames_(frames) {
    cfg.levels.validate(frames);
    phi_ = nn::Linear(store, "mlt.phi", dim_in, cfg.dim_model, rng);
    pe_ = cfg.positional_encoding ? positional_encoding(frames, cfg.dim_model)
                                  : Tensor::zeros({frames, cfg.dim_model});
    for (std::size_t i = 0; i < cfg.levels.cardinalities.size(); ++i) {
      const std::size_t w = cfg.levels.cardinalities[i];
      const std::size_t n_tuples = binomial(frames, w);
      const std::size_t reps = cfg.levels.tuple_reps[i];
      averages_.push_back(tuple_average_matrix(frames, w));
      // Identity when nothing is reduced, otherwise each representation
      // starts as the mean of one contiguous chunk of lexicographic tuples.
      std::vector<double> f(reps * n_tuples, 0.0);
      for (std::size_t r = 0; r < reps; ++r) {
        const std::size_t lo = r * n_tuples / reps, hi = (r + 1) * n_tuples / reps;
        for (std::size_t c = lo; c < hi; ++c) f[r * n_tuples + c] = 1.0 / static_cast<double>(hi - lo);
      }
      reducers_.push_back(store.add("mlt.reduce" + std::to_string(w), {reps, n_tuples}, std::move(f)));
    }
    query_ = nn::Linear(store, "mlt.query", cfg.dim_model, cfg.dim_k, rng);
    key_ = nn::Linear(store, "mlt.key", cfg.dim_model, cfg.dim_k, rng);
    value_ = nn::Linear(store, "mlt.value", cfg.dim_model, cfg.dim_v, rng);
    norm_ = nn::LayerNorm(store, "mlt.norm", cfg.dim_k);
  }

  const MltConfig& config() const { return cfg_; }

  /// Φ(seq) + PE for every frame: [M × D].
  Tensor frame_embeddings(const Tensor& seq) const {
    if (seq.rank() != 2 || seq.dim(0) != frames_) {
      throw ShapeError("mlt: sequence must have " + std::to_string(frames_) + " frames");
    }
    return tensor::add(phi_(seq), pe_);
  }

  /// Mean over the tuple's frames of Φ(seq[n]) + PE(n).
  Tensor embed_tuple(const Tensor& seq, const TupleIndex& tuple) const {
    std::vector<double> a(frames_, 0.0);
    for (std::size_t idx : tuple) {
      if (idx < 1 || idx > frames_) throw ShapeError("embed_tuple: frame index out of range");
      a[idx - 1] += 1.0 / static_cast<double>(tuple.size());
    }
    return tensor::reshape(tensor::matmul(Tensor({1, frames_}, std::move(a)), frame_embeddings(seq)),
                           {cfg_.dim_model});
  }

  /// All C(M, w) tuple embeddings of level `level_index`: [C(M,w) × D].
  Tensor embed_level(const Tensor& frame_emb, std::size_t level_index) const {
    return tensor::matmul(averages_.at(level_index), frame_emb);
  }

  /// Linear mix along the tuple axis: [C(M,w) × D] -> [N̂_w × D].
  Tensor reduce_level(const Tensor& tuple_emb, std::size_t level_index) const {
    const Tensor& f = reducers_.at(level_index);
    if (tuple_emb.dim(0) != f.dim(1)) {
      throw ShapeError("reduce_tuples: expected " + std::to_string(f.dim(1)) + " tuples, got " +
                       std::to_string(tuple_emb.dim(0)));
    }
    return tensor::matmul(f, tuple_emb);
  }

  /// Reduced tuple representations of every level before projection.
  MultiLevelRep levels(const Tensor& seq) const {
    const Tensor emb = frame_embeddings(seq);
    std::vector<Tensor> blocks;
    for (std::size_t i = 0; i < reducers_.size(); ++i) {
      blocks.push_back(reduce_level(embed_level(emb, i), i));
    }
    return {tensor::concat(blocks, 0), cfg_.levels.block_offsets(), cfg_.levels.cardinalities};
  }

  MultiLevelRep project(const MultiLevelRep& lv, const nn::Linear& map) const {
    return {map(lv.rows), lv.offsets, lv.cardinalities};
  }
  MultiLevelRep keys(const MultiLevelRep& lv) const { return project(lv, key_); }
  MultiLevelRep queries(const MultiLevelRep& lv) const { return project(lv, query_); }
  MultiLevelRep values(const MultiLevelRep& lv) const { return project(lv, value_); }

  Tensor normalize(const Tensor& rows) const { return norm_(rows); }

  /// Attention of each query row over all support rows (k, t) of one class.
  Tensor attention_scores(const Tensor& query_rows, const Tensor& support_key_rows,
                          std::size_t axis = 1) const {
    return attention_from_normalized(normalize(query_rows), normalize(support_key_rows), axis);
  }

  nn::Linear& phi() { return phi_; }
  nn::Linear& key_map() { return key_; }
  nn::Linear& query_map() { return query_; }
  nn::Linear& value_map() { return value_; }
  Tensor& reducer(std::size_t level_index) { return reducers_.at(level_index); }

 private:
  MltConfig cfg_;
  std::size_t frames_ = 0;
  nn::Linear phi_;
  Tensor pe_;
  std::vector<Tensor> averages_;
  std::vector<Tensor> reducers_;
  nn::Linear query_;
  nn::Linear key_;
  nn::Linear value_;
  nn::LayerNorm norm_;
};

}  // namespace tsamlt::mlt
