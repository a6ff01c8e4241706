#pragma once

// Built-in property suite: gradient checks, Sinkhorn against the exact
// assignment, tuple combinatorics, warp examples and prototype invariances.
// Faults can be injected to confirm that the suite notices them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tsamlt/gradcheck.hpp"
#include "tsamlt/model.hpp"

namespace tsamlt::selftest {

using tensor::Tensor;

inline Tensor random_tensor(tensor::Shape shape, std::mt19937_64& rng, double lo = -2.0,
                            double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(tensor::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

struct OpCase {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
};

/// Every differentiable operation with an input generator that keeps it
/// away from kinks (e.g. positive inputs for log and sqrt).
inline std::vector<OpCase> op_catalogue() {
  namespace ts = tensor;
  using V = std::vector<Tensor>;
  auto r = [](ts::Shape s) {
    return [s](std::mt19937_64& rng) { return V{random_tensor(s, rng)}; };
  };
  auto pos = [](ts::Shape s) {
    return [s](std::mt19937_64& rng) { return V{random_tensor(s, rng, 0.5, 2.0)}; };
  };
  auto pair = [](ts::Shape a, ts::Shape b) {
    return [a, b](std::mt19937_64& g) { return V{random_tensor(a, g), random_tensor(b, g)}; };
  };
  auto triple = [](ts::Shape a, ts::Shape b, ts::Shape c) {
    return [a, b, c](std::mt19937_64& g) {
      return V{random_tensor(a, g), random_tensor(b, g), random_tensor(c, g)};
    };
  };
  return {
      {"matmul", [](const V& x) { return ts::matmul(x[0], x[1]); }, pair({3, 4}, {4, 2})},
      {"transpose", [](const V& x) { return ts::transpose(x[0]); }, r({3, 2})},
      {"linear", [](const V& x) { return ts::linear(x[0], x[1], x[2]); },
       triple({3, 4}, {2, 4}, {2})},
      {"add", [](const V& x) { return ts::add(x[0], x[1]); }, pair({2, 3}, {2, 3})},
      {"sub", [](const V& x) { return ts::sub(x[0], x[1]); }, pair({2, 3}, {2, 3})},
      {"mul", [](const V& x) { return ts::mul(x[0], x[1]); }, pair({2, 3}, {2, 3})},
      {"affine", [](const V& x) { return ts::affine(x[0], -1.5, 0.25); }, r({4})},
      {"exp", [](const V& x) { return ts::exp(x[0]); }, r({5})},
      {"log", [](const V& x) { return ts::log(x[0]); }, pos({5})},
      {"sqrt", [](const V& x) { return ts::sqrt(x[0]); }, pos({5})},
      {"square", [](const V& x) { return ts::square(x[0]); }, r({5})},
      {"relu", [](const V& x) { return ts::relu(x[0]); }, r({6})},
      {"leaky_relu", [](const V& x) { return ts::leaky_relu(x[0]); }, r({6})},
      {"add_rowwise", [](const V& x) { return ts::add_rowwise(x[0], x[1]); }, pair({3, 4}, {4})},
      {"add_colwise", [](const V& x) { return ts::add_colwise(x[0], x[1]); }, pair({3, 4}, {3})},
      {"sum", [](const V& x) { return ts::sum(x[0]); }, r({3, 3})},
      {"mean", [](const V& x) { return ts::mean(x[0]); }, r({3, 3})},
      {"sum_axis0", [](const V& x) { return ts::sum_axis(x[0], 0); }, r({3, 4})},
      {"mean_axis1", [](const V& x) { return ts::mean_axis(x[0], 1); }, r({3, 4})},
      {"set_mean", [](const V& x) { return ts::set_mean(x[0]); }, r({5, 3})},
      {"logsumexp0", [](const V& x) { return ts::logsumexp(x[0], 0); }, r({3, 4})},
      {"logsumexp1", [](const V& x) { return ts::logsumexp(x[0], 1); }, r({3, 4})},
      {"softmax1", [](const V& x) { return ts::softmax(x[0], 1); }, r({3, 4})},
      {"softmax0", [](const V& x) { return ts::softmax(x[0], 0); }, r({3, 4})},
      {"log_softmax", [](const V& x) { return ts::log_softmax(x[0], 1); }, r({3, 4})},
      {"reshape", [](const V& x) { return ts::reshape(x[0], {4, 3}); }, r({3, 4})},
      {"concat0", [](const V& x) { return ts::concat({x[0], x[1]}, 0); }, pair({2, 3}, {1, 3})},
      {"concat1", [](const V& x) { return ts::concat({x[0], x[1]}, 1); }, pair({2, 3}, {2, 2})},
      {"slice", [](const V& x) { return ts::slice(x[0], 1, 1, 3); }, r({3, 4})},
      {"pick", [](const V& x) { return ts::pick(x[0], {2, 0, 1}); }, r({3, 4})},
      {"unfold_time", [](const V& x) { return ts::unfold_time(x[0], 3); }, r({5, 2})},
      {"pairwise_sq_distance", [](const V& x) { return ts::pairwise_sq_distance(x[0], x[1]); },
       pair({3, 4}, {2, 4})},
      {"layer_norm", [](const V& x) { return ts::layer_norm(x[0], x[1], x[2]); },
       triple({3, 4}, {4}, {4})},
      {"batch_norm_train", [](const V& x) { return ts::batch_norm_train(x[0], x[1], x[2]); },
       triple({4, 3}, {3}, {3})},
      {"batch_norm_eval",
       [](const V& x) {
         return ts::batch_norm_eval(x[0], x[1], x[2], std::vector<double>{0.1, -0.2, 0.3},
                                    std::vector<double>{0.5, 1.5, 2.0});
       },
       triple({4, 3}, {3}, {3})},
      {"warp", [](const V& x) { return tsa::warp(x[0], x[1]); },
       [](std::mt19937_64& g) {
         std::uniform_real_distribution<double> zoom(0.4, 1.4), pan(-0.5, 0.5);
         auto f = random_tensor({8, 3}, g);
         const double a = zoom(g), b = pan(g);
         return V{f, Tensor::vector({a, b})};
       }},
      {"combine", [](const V& x) { return tsa::combine(x[0], x[1], ts::softmax(x[2], 0)); },
       triple({2}, {2}, {2})},
      {"cost_matrix", [](const V& x) { return metrics::cost_matrix(x[0], x[1]); },
       pair({4, 3}, {5, 3})},
      {"sinkhorn", [](const V& x) { return metrics::sinkhorn(x[0], {0.1, 30, 0.0}).distance; },
       [](std::mt19937_64& g) {
         const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 6)(g);
         return V{random_tensor({n, n}, g, 0.0, 2.0)};
       }},
      {"seq_distance", [](const V& x) { return metrics::seq_distance(x[0], x[1]); },
       pair({4, 3}, {4, 3})},
      {"attention", [](const V& x) { return mlt::attention_from_normalized(x[0], x[1]); },
       pair({3, 4}, {5, 4})},
      {"prototype", [](const V& x) { return mlt::prototype(ts::softmax(x[0], 1), x[1]); },
       pair({3, 5}, {5, 4})},
      {"classify_loss",
       [](const V& x) { return metrics::classify_and_loss(x[0], {2, 0, 1, 1}).loss; },
       r({4, 3})},
  };
}

/// Injected defects for mutation testing of the suite.
struct Faults {
  bool softmax_wrong_axis = false;  // attention normalized over support rows
  bool warp_zero_padding = false;   // warp reads zeros outside the sequence
};

struct Property {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

struct Options {
  std::size_t seeds = 10;
  Faults faults;
};

/// Small model used by the end-to-end checks.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.way = 3;
  c.frames = 5;
  c.dim_in = 4;
  c.tsa.conv_channels = {4};
  c.tsa.task_hidden = 4;
  c.mlt.levels.cardinalities = {1, 2};
  c.mlt.levels.tuple_reps = {5, 4};
  c.mlt.dim_model = 6;
  c.mlt.dim_k = 4;
  c.mlt.dim_v = 4;
  c.ot = {0.1, 20, 0.0};
  return c;
}

/// Adds Gaussian noise to every trainable entry so no gradient path is
/// switched off by a zero initialization.
inline void perturb(Model& model, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> noise(0.0, stddev);
  for (const auto& e : model.params().entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    for (auto& v : t.mutable_data()) v += noise(rng);
  }
}

inline episodes::EmbeddingSequence random_sequence(std::size_t frames, std::size_t dim,
                                                   std::mt19937_64& rng, std::string id,
                                                   std::size_t cls) {
  std::normal_distribution<double> dist(0.0, 1.0);
  episodes::EmbeddingSequence s;
  s.frames = frames;
  s.dim = dim;
  s.values.resize(frames * dim);
  for (auto& x : s.values) x = dist(rng);
  s.video_id = std::move(id);
  s.class_id = cls;
  return s;
}

inline episodes::Episode random_episode(std::size_t way, std::size_t shot, std::size_t queries,
                                        std::size_t frames, std::size_t dim,
                                        std::mt19937_64& rng) {
  episodes::Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.support.resize(way);
  std::size_t next = 0;
  for (std::size_t c = 0; c < way; ++c) {
    ep.dataset_classes.push_back(c);
    for (std::size_t k = 0; k < shot; ++k)
      ep.support[c].push_back(random_sequence(frames, dim, rng, "s" + std::to_string(next++), c));
  }
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t c = q % way;
    ep.queries.push_back({random_sequence(frames, dim, rng, "q" + std::to_string(next++), c), c});
  }
  return ep;
}

/// Directional check of the full episode loss w.r.t. every trainable
/// parameter of a perturbed tiny model.
inline gradcheck::Result episode_gradient(std::uint64_t seed, metrics::LossVariant loss) {
  auto cfg = tiny_model_config();
  cfg.loss = loss;
  std::mt19937_64 rng(seed);
  Model model(cfg, seed);
  perturb(model, rng, 0.2);
  const auto ep = random_episode(cfg.way, 1, 3, cfg.frames, cfg.dim_in, rng);
  return gradcheck::check_directional([&] { return model.forward(ep, true).loss; },
                                      model.trainable(), rng);
}

namespace detail {

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(3);
  os << x;
  return os.str();
}

template <class Fn>
Property timed(const std::string& name, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Property p = fn();
  p.name = name;
  p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return p;
}

inline Tensor ramp(std::size_t frames, std::size_t dim) {
  std::vector<double> v(frames * dim);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < dim; ++k) v[t * dim + k] = static_cast<double>(10 * t + k + 1);
  return Tensor({frames, dim}, std::move(v));
}

}  // namespace detail

inline std::vector<Property> run(const Options& opts = {}) {
  using detail::fmt;
  using detail::timed;
  const auto border = opts.faults.warp_zero_padding ? tsa::BorderMode::kZeros : tsa::BorderMode::kClamp;
  const std::size_t axis = opts.faults.softmax_wrong_axis ? 0 : 1;
  std::vector<Property> out;

  out.push_back(timed("op gradients", [&] {
    double worst = 0.0;
    std::string worst_op;
    for (const auto& c : op_catalogue()) {
      for (std::uint64_t s = 0; s < opts.seeds; ++s) {
        std::mt19937_64 rng(s);
        const auto r = gradcheck::check_op(c.op, c.inputs(rng), rng);
        if (r.rel_error > worst) {
          worst = r.rel_error;
          worst_op = c.name;
        }
      }
    }
    return Property{"", worst < 1e-4, "worst rel err " + fmt(worst) + " (" + worst_op + ")"};
  }));

  out.push_back(timed("episode loss gradient", [&] {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < opts.seeds; ++s) {
      worst = std::max(worst, episode_gradient(s, metrics::LossVariant::kFusion).rel_error);
    }
    return Property{"", worst < 1e-3, "worst rel err " + fmt(worst)};
  }));

  out.push_back(timed("sinkhorn vs exact assignment", [&] {
    double worst_gap = 0.0, worst_violation = 0.0;
    std::mt19937_64 rng(42);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < 10 * opts.seeds; ++i) {
      const std::size_t n = 2 + i % 7;
      std::vector<double> a(n * 4), b(n * 4);
      for (auto& x : a) x = g(rng);
      for (auto& x : b) x = g(rng);
      Tensor cost = metrics::cost_matrix(Tensor({n, 4}, a), Tensor({n, 4}, b));
      const auto r = metrics::sinkhorn(cost, {0.005, 100, 1e-9, 100});
      const double exact = metrics::exact_ot(cost);
      worst_gap = std::max(worst_gap, std::abs(r.distance.item() - exact) / exact);
      worst_violation = std::max(worst_violation, r.marginal_violation);
    }
    return Property{"", worst_gap < 0.01 && worst_violation < 1e-6,
                    "worst rel gap " + fmt(worst_gap) + ", worst violation " + fmt(worst_violation)};
  }));

  out.push_back(timed("tuple counts", [&] {
    bool ok = true;
    std::string detail = "C(M,w) for M <= 10";
    for (std::size_t m = 1; m <= 10; ++m) {
      std::size_t row = 1;  // C(m, 0)
      for (std::size_t w = 1; w <= m; ++w) {
        row = row * (m - w + 1) / w;
        if (mlt::enumerate_tuples(m, w).size() != row) {
          ok = false;
          detail = "mismatch at M=" + std::to_string(m) + " w=" + std::to_string(w);
        }
      }
    }
    mlt::CardinalityConfig a{{1, 2, 3, 4}, {8, 4, 3, 2}}, b{{1, 2, 3, 4, 5}, {8, 4, 3, 2, 1}};
    ok = ok && a.total_rows() == 17 && b.total_rows() == 18;
    return Property{"", ok, detail + "; rows " + std::to_string(a.total_rows()) + " and " +
                                std::to_string(b.total_rows())};
  }));

  out.push_back(timed("warp identity", [&] {
    std::mt19937_64 rng(7);
    bool ok = true;
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      const std::size_t m = 2 + s % 15;
      const auto x = random_tensor({m, 5}, rng);
      const auto y = tsa::warp(x, tsa::AffineParams{1.0, 0.0}, border);
      for (std::size_t i = 0; i < x.size(); ++i) ok = ok && y[i] == x[i];
    }
    return Property{"", ok, ok ? "bit-exact" : "differs"};
  }));

  out.push_back(timed("warp interpolation example", [&] {
    const auto f = detail::ramp(8, 3);
    const auto y = tsa::warp(f, tsa::AffineParams{0.5, 0.0}, border);
    double err = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
      err = std::max(err, std::abs(y.at(0, k) - (0.25 * f.at(1, k) + 0.75 * f.at(2, k))));
    return Property{"", err <= 1e-12, "max err " + fmt(err)};
  }));

  out.push_back(timed("warp border clamp example", [&] {
    const auto f = detail::ramp(8, 3);
    const auto y = tsa::warp(f, tsa::AffineParams{1.0, 2.0}, border);
    bool ok = true;
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t k = 0; k < 3; ++k) ok = ok && y.at(t, k) == f.at(7, k);
    return Property{"", ok, ok ? "pan past the end repeats the last frame" : "border frames lost"};
  }));

  out.push_back(timed("attention simplex", [&] {
    std::mt19937_64 rng(9);
    double worst = 0.0;
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      const auto q = random_tensor({4, 6}, rng), k = random_tensor({7, 6}, rng);
      const auto a = mlt::attention_from_normalized(q, k, axis);
      for (std::size_t i = 0; i < a.dim(0); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < a.dim(1); ++j) {
          if (a.at(i, j) < 0.0) worst = std::max(worst, 1.0);
          sum += a.at(i, j);
        }
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    return Property{"", worst <= 1e-12, "worst row-sum deviation " + fmt(worst)};
  }));

  // Prototype checks run through a small MLT on random episodes.
  auto prototypes = [&](const Model& model, const std::vector<Tensor>& support, const Tensor& query) {
    const auto& m = model.transformer();
    std::vector<Tensor> k, v;
    for (const auto& s : support) {
      const auto lv = m.levels(s);
      k.push_back(m.keys(lv).rows);
      v.push_back(m.values(lv).rows);
    }
    const auto keys = tensor::concat(k, 0), values = tensor::concat(v, 0);
    const auto lq = m.levels(query);
    const auto scores = m.attention_scores(m.queries(lq).rows, keys, axis);
    return std::pair{mlt::prototype(scores, values), values};
  };

  out.push_back(timed("prototype permutation invariance", [&] {
    tensor::NoGradScope no_grad;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < opts.seeds; ++s) {
      std::mt19937_64 rng(s);
      auto cfg = tiny_model_config();
      Model model(cfg, s);
      std::vector<Tensor> support;
      for (int i = 0; i < 4; ++i) support.push_back(random_tensor({cfg.frames, cfg.dim_in}, rng));
      const auto query = random_tensor({cfg.frames, cfg.dim_in}, rng);
      const auto base = prototypes(model, support, query).first;
      std::shuffle(support.begin(), support.end(), rng);
      const auto shuffled = prototypes(model, support, query).first;
      for (std::size_t i = 0; i < base.size(); ++i) worst = std::max(worst, std::abs(base[i] - shuffled[i]));
    }
    return Property{"", worst <= 1e-12, "max drift " + fmt(worst)};
  }));

  out.push_back(timed("prototype convex hull", [&] {
    tensor::NoGradScope no_grad;
    double worst = 0.0;  // largest excursion outside the per-column support range
    for (std::uint64_t s = 0; s < opts.seeds; ++s) {
      std::mt19937_64 rng(s + 1000);
      auto cfg = tiny_model_config();
      Model model(cfg, s);
      std::vector<Tensor> support;
      for (int i = 0; i < 3; ++i) support.push_back(random_tensor({cfg.frames, cfg.dim_in}, rng));
      const auto [proto, values] = prototypes(model, support, random_tensor({cfg.frames, cfg.dim_in}, rng));
      for (std::size_t c = 0; c < values.dim(1); ++c) {
        double lo = values.at(0, c), hi = lo;
        for (std::size_t r = 0; r < values.dim(0); ++r) {
          lo = std::min(lo, values.at(r, c));
          hi = std::max(hi, values.at(r, c));
        }
        for (std::size_t r = 0; r < proto.dim(0); ++r) {
          worst = std::max({worst, lo - proto.at(r, c), proto.at(r, c) - hi});
        }
      }
    }
    return Property{"", worst <= 1e-12, "max excursion " + fmt(worst)};
  }));

  out.push_back(timed("task modulation simplex and order", [&] {
    tensor::NoGradScope no_grad;
    double worst = 0.0;
    bool order_ok = true;
    for (std::uint64_t s = 0; s < opts.seeds; ++s) {
      std::mt19937_64 rng(s);
      auto cfg = tiny_model_config();
      Model model(cfg, s);
      perturb(model, rng, 0.5);
      std::vector<Tensor> videos;
      for (int i = 0; i < 6; ++i) videos.push_back(random_tensor({cfg.frames, cfg.dim_in}, rng));
      const auto theta = model.alignment().task()(videos);
      worst = std::max(worst, std::abs(theta[0] + theta[1] - 1.0));
      std::shuffle(videos.begin(), videos.end(), rng);
      const auto again = model.alignment().task()(videos);
      order_ok = order_ok && again[0] == theta[0] && again[1] == theta[1];
    }
    return Property{"", worst <= 1e-12 && order_ok,
                    "worst |sum-1| " + fmt(worst) + (order_ok ? ", order invariant" : ", order dependent")};
  }));

  return out;
}

inline bool all_pass(const std::vector<Property>& props) {
  return std::all_of(props.begin(), props.end(), [](const Property& p) { return p.pass; });
}

}  // namespace tsamlt::selftest
