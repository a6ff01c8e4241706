#pragma once

// End-to-end episode pipeline: alignment -> multi-level prototypes ->
// distances -> class logits -> loss.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/episodes.hpp"
#include "tsamlt/metrics.hpp"
#include "tsamlt/mlt.hpp"
#include "tsamlt/nn.hpp"
#include "tsamlt/tsa.hpp"

namespace tsamlt {

struct ModelConfig {
  std::size_t way = 5;
  std::size_t frames = 8;
  std::size_t dim_in = 64;
  tsa::TsaConfig tsa;
  mlt::MltConfig mlt;
  metrics::SinkhornOptions ot;
  metrics::LossVariant loss = metrics::LossVariant::kFusion;

  void validate() const {
    if (way < 2) throw ConfigError("model: way must be >= 2");
    if (frames < 2) throw ConfigError("model: frames must be >= 2");
    if (dim_in < 1) throw ConfigError("model: dim must be >= 1");
    if (mlt.dim_model < 1 || mlt.dim_v < 1) throw ConfigError("model: dims must be positive");
    if (mlt.dim_k < 2) throw ConfigError("model: dim_k must be >= 2 (layer norm)");
    if (tsa.conv_channels.empty()) throw ConfigError("model: tsa.conv_channels is empty");
    if (!(ot.epsilon > 0.0)) throw ConfigError("model: ot.epsilon must be positive");
    if (ot.max_iters < 1) throw ConfigError("model: ot.max_iters must be >= 1");
    mlt.levels.validate(frames);
  }

  bool uses_ot() const { return loss != metrics::LossVariant::kSequence; }
  bool uses_sequence() const { return loss != metrics::LossVariant::kOt; }
};

struct EpisodeResult {
  tensor::Tensor loss;
  tensor::Tensor logits;         // [P × N]
  tensor::Tensor probabilities;  // [P × N]
  tensor::Tensor dis_ot;         // [P × N], undefined when OT is not used
  tensor::Tensor dis_seq;        // [P × N], undefined under the OT-only loss
  tensor::Tensor theta;          // episode modulation, undefined without alignment
  std::vector<std::size_t> labels;
  double accuracy = 0.0;
  std::size_t sinkhorn_calls = 0;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    tsa_ = tsa::TemporalAlignment(params_, cfg.dim_in, cfg.tsa, rng);
    mlt_ = mlt::MultipleLevelTransformer(params_, cfg.frames, cfg.dim_in, cfg.mlt, rng);
    fusion_ = metrics::FusionNet(params_, cfg.way);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  tsa::TemporalAlignment& alignment() { return tsa_; }
  mlt::MultipleLevelTransformer& transformer() { return mlt_; }
  const mlt::MultipleLevelTransformer& transformer() const { return mlt_; }
  const tsa::TemporalAlignment& alignment() const { return tsa_; }
  metrics::FusionNet& fusion() { return fusion_; }

  std::vector<tensor::Tensor> trainable() const {
    std::vector<tensor::Tensor> out;
    for (const auto& e : params_.entries())
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  /// Runs one episode. Training mode normalizes the fusion batch over the
  /// episode's queries and updates its running statistics; evaluation mode
  /// only reads parameters and is safe to call from several threads.
  EpisodeResult forward(const episodes::Episode& ep, bool training,
                        tsa::BorderMode border = tsa::BorderMode::kClamp) const {
    using tensor::Tensor;
    if (ep.way != cfg_.way) {
      throw ConfigError("model: built for " + std::to_string(cfg_.way) + "-way, episode is " +
                        std::to_string(ep.way) + "-way");
    }
    if (ep.queries.empty()) throw ConfigError("model: episode has no queries");

    std::vector<Tensor> videos;
    for (const auto& cls : ep.support)
      for (const auto& s : cls) videos.push_back(check_sequence(s).as_tensor());
    for (const auto& q : ep.queries) videos.push_back(check_sequence(q.sequence).as_tensor());

    EpisodeResult res;
    if (cfg_.tsa.enabled) {
      auto aligned = tsa_.forward(videos, border);
      videos = std::move(aligned.warped);
      res.theta = aligned.theta;
    }

    std::vector<mlt::MultiLevelRep> levels;
    levels.reserve(videos.size());
    for (const auto& v : videos) levels.push_back(mlt_.levels(v));

    const std::size_t n_support = ep.way * ep.shot;
    std::vector<Tensor> class_keys, class_values;
    for (std::size_t c = 0; c < ep.way; ++c) {
      std::vector<Tensor> k, v;
      for (std::size_t s = 0; s < ep.shot; ++s) {
        const auto& lv = levels[c * ep.shot + s];
        k.push_back(mlt_.keys(lv).rows);
        v.push_back(mlt_.values(lv).rows);
      }
      class_keys.push_back(mlt_.normalize(tensor::concat(k, 0)));
      class_values.push_back(tensor::concat(v, 0));
    }

    std::vector<Tensor> ot_cells, seq_cells;
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
      const auto& lv = levels[n_support + q];
      const Tensor query_norm = mlt_.normalize(mlt_.queries(lv).rows);
      const Tensor query_values = mlt_.values(lv).rows;
      for (std::size_t c = 0; c < ep.way; ++c) {
        const Tensor scores = mlt::attention_from_normalized(query_norm, class_keys[c]);
        const Tensor proto = mlt::prototype(scores, class_values[c]);
        if (cfg_.uses_sequence()) seq_cells.push_back(metrics::seq_distance(query_values, proto));
        if (cfg_.uses_ot()) {
          ot_cells.push_back(
              metrics::sinkhorn(metrics::cost_matrix(query_values, proto), cfg_.ot).distance);
          ++res.sinkhorn_calls;
        }
      }
      res.labels.push_back(ep.queries[q].label);
    }

    const tensor::Shape grid{ep.queries.size(), ep.way};
    if (!seq_cells.empty()) res.dis_seq = tensor::reshape(tensor::concat(seq_cells, 0), grid);
    if (!ot_cells.empty()) res.dis_ot = tensor::reshape(tensor::concat(ot_cells, 0), grid);

    switch (cfg_.loss) {
      case metrics::LossVariant::kFusion:
        res.logits = fusion_(res.dis_ot, res.dis_seq, training);
        break;
      case metrics::LossVariant::kSequence:
        res.logits = tensor::neg(res.dis_seq);
        break;
      case metrics::LossVariant::kOt:
        res.logits = tensor::neg(res.dis_ot);
        break;
    }
    auto cls = metrics::classify_and_loss(res.logits, res.labels);
    res.loss = cls.loss;
    res.probabilities = cls.probabilities;
    res.accuracy = metrics::tie_aware_accuracy(res.logits, res.labels);
    return res;
  }

 private:
  const episodes::EmbeddingSequence& check_sequence(const episodes::EmbeddingSequence& s) const {
    if (s.frames != cfg_.frames || s.dim != cfg_.dim_in) {
      throw ShapeError("model: sequence " + s.video_id + " is " + std::to_string(s.frames) + "x" +
                       std::to_string(s.dim) + ", model expects " + std::to_string(cfg_.frames) +
                       "x" + std::to_string(cfg_.dim_in));
    }
    return s;
  }

  ModelConfig cfg_;
  nn::ParamStore params_;
  tsa::TemporalAlignment tsa_;
  mlt::MultipleLevelTransformer mlt_;
  mutable metrics::FusionNet fusion_;
};

}  // namespace tsamlt
