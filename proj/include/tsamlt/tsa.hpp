#pragma once

// Task-specific temporal alignment: two positioning networks propose an
// affine time warp (zoom a, pan b) per video, an episode-level network
// mixes the two proposals, and every sequence is resampled along time.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/nn.hpp"
#include "tsamlt/ops.hpp"

namespace tsamlt::tsa {

using tensor::Shape;
using tensor::Tensor;

/// Affine time warp in normalized time units; identity is (1, 0).
struct AffineParams {
  double a = 1.0;
  double b = 0.0;
};

/// Episode-level mixing weights; lambda1 + lambda2 = 1.
struct Modulation {
  double lambda1 = 0.5;
  double lambda2 = 0.5;
};

enum class BorderMode {
  kClamp,  // out-of-range coordinates repeat the border frame
  kZeros,  // out-of-range neighbours contribute zero
};

struct TsaConfig {
  bool enabled = true;
  std::vector<std::size_t> conv_channels{64, 32};
  std::size_t kernel = 3;
  std::size_t task_hidden = 32;
  bool init_identity = true;
};

/// Fractional source index of output frame t for warp (a, b) over M frames.
/// Interval coordinate u_t = (2t-(M-1))/(M-1), grid x = a·u_t + b, index
/// (x+1)/2·(M-1); rearranged so that (1, 0) yields exactly t.
inline double source_index(double a, double b, std::size_t t, std::size_t frames) {
  const double span = static_cast<double>(frames - 1);
  return (a * (2.0 * static_cast<double>(t) - span) + (b + 1.0) * span) / 2.0;
}

/// Resamples x[M×D] along time at the warped grid. Differentiable w.r.t.
/// both the features and params = [a, b].
inline Tensor warp(const Tensor& x, const Tensor& params, BorderMode mode = BorderMode::kClamp) {
  tensor::detail::require_rank(x, 2, "warp");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (m < 2) throw ShapeError("warp: need at least 2 frames");
  if (params.size() != 2) throw ShapeError("warp: params must hold [a, b]");
  const double a = params[0], b = params[1];
  const double last = static_cast<double>(m - 1);

  struct Tap {
    std::ptrdiff_t lo = 0;
    std::ptrdiff_t hi = 0;
    double frac = 0.0;
    bool clamped = false;  // outside [0, M-1] under clamp mode
  };
  std::vector<Tap> taps(m);
  std::vector<double> y(m * d, 0.0);
  auto frame_value = [&](std::ptrdiff_t row, std::size_t k) -> double {
    if (row < 0 || row >= static_cast<std::ptrdiff_t>(m)) return 0.0;
    return x[static_cast<std::size_t>(row) * d + k];
  };
  for (std::size_t t = 0; t < m; ++t) {
    const double idx = source_index(a, b, t, m);
    Tap& tap = taps[t];
    if (mode == BorderMode::kClamp && (idx < 0.0 || idx > last)) {
      tap.clamped = true;
      tap.lo = tap.hi = idx < 0.0 ? 0 : static_cast<std::ptrdiff_t>(m - 1);
    } else if (mode == BorderMode::kClamp) {
      tap.lo = std::min(static_cast<std::ptrdiff_t>(std::floor(idx)),
                        static_cast<std::ptrdiff_t>(m) - 2);
      tap.hi = tap.lo + 1;
      tap.frac = idx - static_cast<double>(tap.lo);
    } else {
      const double fl = std::floor(idx);
      // Coordinates far outside the sequence read nothing.
      tap.lo = fl < -1.0 ? -2 : (fl > last ? static_cast<std::ptrdiff_t>(m) + 1
                                           : static_cast<std::ptrdiff_t>(fl));
      tap.hi = tap.lo + 1;
      tap.frac = (fl < -1.0 || fl > last) ? 0.0 : idx - fl;
    }
    for (std::size_t k = 0; k < d; ++k) {
      if (tap.clamped || tap.frac == 0.0) {
        y[t * d + k] = frame_value(tap.lo, k);
      } else if (tap.frac == 1.0) {
        y[t * d + k] = frame_value(tap.hi, k);
      } else {
        y[t * d + k] = (1.0 - tap.frac) * frame_value(tap.lo, k) + tap.frac * frame_value(tap.hi, k);
      }
    }
  }

  Tensor out = tensor::detail::make_output("warp", {m, d}, std::move(y), {&x, &params});
  tensor::detail::on_backward(out, [xn = x.node(), pn = params.node(), on = out.node(),
                                    taps = std::move(taps), m, d] {
    auto gx = tensor::detail::grad_of(*xn);
    auto gp = tensor::detail::grad_of(*pn);
    const auto in_range = [m](std::ptrdiff_t r) {
      return r >= 0 && r < static_cast<std::ptrdiff_t>(m);
    };
    for (std::size_t t = 0; t < m; ++t) {
      const Tap& tap = taps[t];
      double d_idx = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double g = on->grad[t * d + k];
        if (tap.clamped) {
          if (!gx.empty()) gx[static_cast<std::size_t>(tap.lo) * d + k] += g;
          continue;
        }
        const double f_lo = in_range(tap.lo) ? xn->value[static_cast<std::size_t>(tap.lo) * d + k] : 0.0;
        const double f_hi = in_range(tap.hi) ? xn->value[static_cast<std::size_t>(tap.hi) * d + k] : 0.0;
        if (!gx.empty()) {
          if (in_range(tap.lo)) gx[static_cast<std::size_t>(tap.lo) * d + k] += (1.0 - tap.frac) * g;
          if (in_range(tap.hi)) gx[static_cast<std::size_t>(tap.hi) * d + k] += tap.frac * g;
        }
        d_idx += g * (f_hi - f_lo);
      }
      if (!gp.empty() && !tap.clamped) {
        const double span = static_cast<double>(m - 1);
        gp[0] += d_idx * (2.0 * static_cast<double>(t) - span) / 2.0;
        gp[1] += d_idx * span / 2.0;
      }
    }
  });
  return out;
}

/// a = λ1·a1 + λ2·a2, b = λ1·b1 + λ2·b2 for theta on the simplex. The value
/// is evaluated as a move from the dominant endpoint so that equal
/// proposals and one-hot weights reproduce their inputs exactly.
inline Tensor combine(const Tensor& rho1, const Tensor& rho2, const Tensor& theta) {
  if (rho1.size() != 2 || rho2.size() != 2 || theta.size() != 2) {
    throw ShapeError("combine: expected three length-2 tensors");
  }
  const double l1 = theta[0], l2 = theta[1];
  if (l1 < 0.0 || l2 < 0.0 || std::abs(l1 + l2 - 1.0) > 1e-12) {
    throw ConfigError("combine: modulation must lie on the simplex");
  }
  std::vector<double> y(2);
  for (std::size_t i = 0; i < 2; ++i) {
    y[i] = l2 <= l1 ? rho1[i] + l2 * (rho2[i] - rho1[i]) : rho2[i] + l1 * (rho1[i] - rho2[i]);
  }
  Tensor out = tensor::detail::make_output("combine", {2}, std::move(y), {&rho1, &rho2, &theta});
  tensor::detail::on_backward(out, [r1 = rho1.node(), r2 = rho2.node(), th = theta.node(),
                                    on = out.node()] {
    const auto& g = on->grad;
    if (auto g1 = tensor::detail::grad_of(*r1); !g1.empty())
      for (std::size_t i = 0; i < 2; ++i) g1[i] += g[i] * th->value[0];
    if (auto g2 = tensor::detail::grad_of(*r2); !g2.empty())
      for (std::size_t i = 0; i < 2; ++i) g2[i] += g[i] * th->value[1];
    if (auto gt = tensor::detail::grad_of(*th); !gt.empty()) {
      gt[0] += g[0] * r1->value[0] + g[1] * r1->value[1];
      gt[1] += g[0] * r2->value[0] + g[1] * r2->value[1];
    }
  });
  return out;
}

inline AffineParams combine(const AffineParams& rho1, const AffineParams& rho2,
                            const Modulation& theta) {
  tensor::NoGradScope no_grad;
  const Tensor r = combine(Tensor::vector({rho1.a, rho1.b}), Tensor::vector({rho2.a, rho2.b}),
                           Tensor::vector({theta.lambda1, theta.lambda2}));
  return {r[0], r[1]};
}

inline Tensor warp(const Tensor& x, const AffineParams& p, BorderMode mode = BorderMode::kClamp) {
  return warp(x, Tensor::vector({p.a, p.b}), mode);
}

/// Temporal conv stack + global mean + linear head producing [a, b].
class PositioningNet {
 public:
  PositioningNet() = default;
  PositioningNet(nn::ParamStore& store, const std::string& name, std::size_t dim_in,
                 const TsaConfig& cfg, std::mt19937_64& rng) {
    std::size_t in = dim_in;
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      convs_.emplace_back(store, name + ".conv" + std::to_string(i), in, cfg.conv_channels[i],
                          cfg.kernel, rng);
      in = cfg.conv_channels[i];
    }
    if (cfg.init_identity) {
      head_.weight = store.add(name + ".head.weight", {2, in}, std::vector<double>(2 * in, 0.0));
      head_.bias = store.add(name + ".head.bias", {2}, {1.0, 0.0});
    } else {
      head_ = nn::Linear(store, name + ".head", in, 2, rng);
    }
  }

  /// x [M×D_in] -> [a, b]
  Tensor operator()(const Tensor& x) const {
    Tensor h = x;
    for (const auto& conv : convs_) h = tensor::relu(conv(h));
    Tensor pooled = tensor::reshape(tensor::mean_axis(h, 0), {1, h.dim(1)});
    return tensor::reshape(head_(pooled), {2});
  }

  nn::Linear& head() { return head_; }

 private:
  std::vector<nn::TemporalConv> convs_;
  nn::Linear head_;
};

/// Deep-sets episode encoder: per-video frame mean -> linear -> ReLU,
/// order-independent mean over videos, linear head, softmax -> [λ1, λ2].
class TaskSpecificNet {
 public:
  TaskSpecificNet() = default;
  TaskSpecificNet(nn::ParamStore& store, const std::string& name, std::size_t dim_in,
                  const TsaConfig& cfg, std::mt19937_64& rng)
      : encoder_(store, name + ".encoder", dim_in, cfg.task_hidden, rng) {
    if (cfg.init_identity) {
      head_.weight = store.add(name + ".head.weight", {2, cfg.task_hidden},
                               std::vector<double>(2 * cfg.task_hidden, 0.0));
      head_.bias = store.add(name + ".head.bias", {2}, {0.0, 0.0});
    } else {
      head_ = nn::Linear(store, name + ".head", cfg.task_hidden, 2, rng);
    }
  }

  Tensor operator()(const std::vector<Tensor>& videos) const {
    if (videos.empty()) throw ConfigError("task modulation: empty episode");
    std::vector<Tensor> rows;
    rows.reserve(videos.size());
    for (const auto& v : videos) {
      rows.push_back(tensor::reshape(tensor::mean_axis(v, 0), {1, v.dim(1)}));
    }
    Tensor per_video = tensor::relu(encoder_(tensor::concat(rows, 0)));
    Tensor pooled = tensor::reshape(tensor::set_mean(per_video), {1, per_video.dim(1)});
    return tensor::reshape(tensor::softmax(head_(pooled), 1), {2});
  }

  nn::Linear& head() { return head_; }

 private:
  nn::Linear encoder_;
  nn::Linear head_;
};

struct AlignedVideos {
  std::vector<Tensor> warped;  // same order as the input
  std::vector<Tensor> params;  // combined [a, b] per video
  std::vector<Tensor> rho1;
  std::vector<Tensor> rho2;
  Tensor theta;                // [λ1, λ2], shared by the episode
};

class TemporalAlignment {
 public:
  TemporalAlignment() = default;
  TemporalAlignment(nn::ParamStore& store, std::size_t dim_in, const TsaConfig& cfg,
                    std::mt19937_64& rng)
      : first_(store, "tsa.loc1", dim_in, cfg, rng),
        second_(store, "tsa.loc2", dim_in, cfg, rng),
        task_(store, "tsa.task", dim_in, cfg, rng) {}

  /// Warps every video of an episode (support and query alike).
  AlignedVideos forward(const std::vector<Tensor>& videos,
                        BorderMode mode = BorderMode::kClamp) const {
    AlignedVideos out;
    out.theta = task_(videos);
    for (const auto& v : videos) {
      Tensor r1 = first_(v);
      Tensor r2 = second_(v);
      Tensor p = combine(r1, r2, out.theta);
      out.warped.push_back(warp(v, p, mode));
      out.params.push_back(p);
      out.rho1.push_back(r1);
      out.rho2.push_back(r2);
    }
    return out;
  }

  PositioningNet& first() { return first_; }
  PositioningNet& second() { return second_; }
  TaskSpecificNet& task() { return task_; }
  const PositioningNet& first() const { return first_; }
  const PositioningNet& second() const { return second_; }
  const TaskSpecificNet& task() const { return task_; }

 private:
  PositioningNet first_;
  PositioningNet second_;
  TaskSpecificNet task_;
};

}  // namespace tsamlt::tsa
