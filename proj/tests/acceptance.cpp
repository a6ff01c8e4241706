// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Reference values come from independent oracles written here (central
// differences, brute-force assignment, Pascal's triangle, hand-derived
// interpolation), not from the library's own checkers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/tsamlt.hpp"

using namespace tsamlt;
using tensor::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(bool pass, const std::string& criterion, const std::string& detail) {
  std::printf("%s  %-28s %s\n", pass ? "PASS" : "FAIL", criterion.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void info(const std::string& what, const std::string& detail) {
  std::printf("INFO  %-28s %s\n", what.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string num(double x, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, x);
  return buf;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

// ---------------------------------------------------------------------------
// Gradient integrity

constexpr double kStep = 1e-5;

// Full Jacobian check of sum(w ⊙ op(x)) against central differences in every
// input coordinate.
double op_gradient_error(const selftest::OpCase& c, std::mt19937_64& rng) {
  const auto inputs = c.inputs(rng);
  std::vector<Tensor> leaves;
  for (const auto& x : inputs) leaves.push_back(Tensor::parameter(x.shape(), {x.data().begin(), x.data().end()}));

  std::vector<double> w;
  {
    tensor::NoGradScope ng;
    const Tensor probe = c.op(leaves);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < probe.size(); ++i) w.push_back(u(rng));
  }
  auto weighted = [&](const Tensor& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };

  std::vector<double> analytic;
  {
    tensor::Tape tape;
    tensor::TapeScope scope(tape);
    const Tensor y = c.op(leaves);
    tape.backward(tensor::sum(tensor::mul(y, Tensor(y.shape(), w))));
  }
  for (const auto& l : leaves) {
    for (std::size_t i = 0; i < l.size(); ++i) analytic.push_back(l.has_grad() ? l.grad()[i] : 0.0);
  }

  std::vector<double> numeric;
  tensor::NoGradScope ng;
  for (auto& l : leaves) {
    auto v = l.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + kStep;
      const double up = weighted(c.op(leaves));
      v[i] = x0 - kStep;
      const double down = weighted(c.op(leaves));
      v[i] = x0;
      numeric.push_back((up - down) / (2.0 * kStep));
    }
  }
  return rel_error(analytic, numeric);
}

// Directional check of the episode loss of a desk-scale model whose weights
// are perturbed away from the (partly zero) initialization.
double episode_gradient_error(std::uint64_t seed, metrics::LossVariant loss, bool tsa) {
  ModelConfig cfg;  // M=8, D=64, 17 multi-level rows
  cfg.loss = loss;
  cfg.tsa.enabled = tsa;
  cfg.ot.tol = 0.0;  // fixed iteration count keeps the loss a smooth function
  cfg.ot.max_iters = 50;
  std::mt19937_64 rng(seed);
  Model model(cfg, seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  auto leaves = model.trainable();
  for (auto& l : leaves)
    for (auto& v : l.mutable_data()) v += noise(rng);
  const auto ep = selftest::random_episode(cfg.way, 1, 5, cfg.frames, cfg.dim_in, rng);

  for (auto& l : leaves) l.zero_grad();
  {
    tensor::Tape tape;
    tensor::TapeScope scope(tape);
    tape.backward(model.forward(ep, true).loss);
  }
  std::vector<std::vector<double>> dir;
  double norm = 0.0;
  std::normal_distribution<double> g(0.0, 1.0);
  for (const auto& l : leaves) {
    dir.emplace_back(l.size());
    for (auto& d : dir.back()) {
      d = g(rng);
      norm += d * d;
    }
  }
  norm = std::sqrt(norm);
  double analytic = 0.0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    for (std::size_t i = 0; i < leaves[p].size(); ++i) {
      dir[p][i] /= norm;
      if (leaves[p].has_grad()) analytic += leaves[p].grad()[i] * dir[p][i];
    }
  }
  tensor::NoGradScope ng;
  auto shift = [&](double s) {
    for (std::size_t p = 0; p < leaves.size(); ++p) {
      auto v = leaves[p].mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dir[p][i];
    }
  };
  shift(kStep);
  const double up = model.forward(ep, true).loss.item();
  shift(-2.0 * kStep);
  const double down = model.forward(ep, true).loss.item();
  shift(kStep);
  const double numeric = (up - down) / (2.0 * kStep);
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

void gradient_integrity() {
  const auto t0 = Clock::now();
  double worst_op = 0.0;
  std::string worst_name;
  const auto ops = selftest::op_catalogue();
  for (const auto& c : ops) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      std::mt19937_64 rng(1000 + s);
      const double e = op_gradient_error(c, rng);
      if (e > worst_op) {
        worst_op = e;
        worst_name = c.name;
      }
    }
  }
  double worst_e2e = 0.0;
  std::size_t e2e_runs = 0;
  for (auto [loss, tsa] : {std::pair{metrics::LossVariant::kFusion, true},
                           std::pair{metrics::LossVariant::kSequence, true},
                           std::pair{metrics::LossVariant::kOt, true},
                           std::pair{metrics::LossVariant::kFusion, false}}) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      worst_e2e = std::max(worst_e2e, episode_gradient_error(s, loss, tsa));
      ++e2e_runs;
    }
  }
  const double t = seconds_since(t0);
  report(worst_op < 1e-4 && worst_e2e < 1e-3 && t < 120.0, "gradient integrity",
         std::to_string(ops.size()) + " ops x 100 seeds: worst " + num(worst_op) + " (" + worst_name +
             ", gate 1e-4); episode loss x " + std::to_string(e2e_runs) + ": worst " + num(worst_e2e) +
             " (gate 1e-3); " + num(t) + " s (gate 120 s)");
}

// ---------------------------------------------------------------------------
// OT correctness

double brute_force_assignment(const Tensor& cost) {
  const std::size_t n = cost.dim(0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost.at(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);  // uniform marginals 1/n
}

void ot_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g(0.0, 1.0);
  const metrics::SinkhornOptions opts{0.005, 100, 1e-9, 100};
  double worst_gap = 0.0, worst_violation = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t n = 2 + i % 7;
    std::vector<double> a(n * 4), b(n * 4);
    for (auto& x : a) x = g(rng);
    for (auto& x : b) x = g(rng);
    const Tensor cost = metrics::cost_matrix(Tensor({n, 4}, a), Tensor({n, 4}, b));
    const auto r = metrics::sinkhorn(cost, opts);
    const double exact = brute_force_assignment(cost);
    double objective = 0.0, violation = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      double row = 0.0, col = 0.0;
      for (std::size_t q = 0; q < n; ++q) {
        objective += r.plan.at(p, q) * cost.at(p, q);
        row += r.plan.at(p, q);
        col += r.plan.at(q, p);
      }
      violation = std::max({violation, std::abs(row - 1.0 / n), std::abs(col - 1.0 / n)});
    }
    worst_gap = std::max(worst_gap, std::abs(objective - exact) / exact);
    worst_violation = std::max(worst_violation, violation);
  }
  const double t = seconds_since(t0);
  report(worst_gap < 0.01 && worst_violation < 1e-6 && t < 60.0, "OT correctness",
         "200 matrices n=2..8, eps=0.005: worst objective gap " + num(worst_gap * 100.0) +
             "% (gate 1%), worst marginal violation " + num(worst_violation) + " (gate 1e-6); " +
             num(t) + " s (gate 60 s)");
}

// ---------------------------------------------------------------------------
// Combinatorics

void combinatorics() {
  std::vector<std::vector<std::size_t>> pascal(11);
  for (std::size_t m = 0; m <= 10; ++m) {
    pascal[m].assign(m + 1, 1);
    for (std::size_t w = 1; w < m; ++w) pascal[m][w] = pascal[m - 1][w - 1] + pascal[m - 1][w];
  }
  bool counts_ok = true;
  std::size_t checked = 0;
  for (std::size_t m = 1; m <= 10; ++m) {
    for (std::size_t w = 1; w <= m; ++w) {
      const auto tuples = mlt::enumerate_tuples(m, w);
      bool distinct = std::adjacent_find(tuples.begin(), tuples.end(),
                                         [](const auto& x, const auto& y) { return !(x < y); }) == tuples.end();
      counts_ok = counts_ok && distinct && tuples.size() == pascal[m][w];
      ++checked;
    }
  }
  auto rows = [](std::vector<std::size_t> card, std::vector<std::size_t> reps) {
    ModelConfig cfg;
    cfg.mlt.levels.cardinalities = std::move(card);
    cfg.mlt.levels.tuple_reps = std::move(reps);
    Model model(cfg, 1);
    std::mt19937_64 rng(3);
    tensor::NoGradScope ng;
    return model.transformer().levels(selftest::random_tensor({8, 64}, rng)).rows.dim(0);
  };
  const std::size_t r17 = rows({1, 2, 3, 4}, {8, 4, 3, 2});
  const std::size_t r18 = rows({1, 2, 3, 4, 5}, {8, 4, 3, 2, 1});
  report(counts_ok && r17 == 17 && r18 == 18, "combinatorics",
         std::to_string(checked) + " (M,w) pairs match C(M,w) for M<=10; rows " + std::to_string(r17) +
             " for {1,2,3,4}/(8,4,3,2) and " + std::to_string(r18) + " for {1..5}/(8,4,3,2,1)");
}

// ---------------------------------------------------------------------------
// Warp identity

void warp_identity() {
  std::mt19937_64 rng(77);
  bool exact = true;
  std::size_t checked = 0;
  for (std::size_t m = 2; m <= 16; ++m) {
    for (int rep = 0; rep < 10; ++rep) {
      const auto x = selftest::random_tensor({m, 7}, rng, -5.0, 5.0);
      const auto y = tsa::warp(x, tsa::AffineParams{1.0, 0.0});
      for (std::size_t i = 0; i < x.size(); ++i) exact = exact && y[i] == x[i];
      ++checked;
    }
  }
  // Full path: combine two identity proposals with any simplex weights, then warp.
  for (double l1 : {0.0, 0.3, 0.5, 1.0}) {
    const auto p = tsa::combine({1.0, 0.0}, {1.0, 0.0}, {l1, 1.0 - l1});
    const auto x = selftest::random_tensor({8, 5}, rng);
    const auto y = tsa::warp(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) exact = exact && y[i] == x[i];
  }
  const auto f = selftest::random_tensor({8, 6}, rng);
  const auto y = tsa::warp(f, tsa::AffineParams{0.5, 0.0});
  double err = 0.0;
  for (std::size_t k = 0; k < 6; ++k) err = std::max(err, std::abs(y.at(0, k) - (0.25 * f.at(1, k) + 0.75 * f.at(2, k))));
  report(exact && err <= 1e-12, "warp identity",
         std::string("(1,0) bit-exact on ") + std::to_string(checked) + " sequences: " + (exact ? "yes" : "NO") +
             "; a=0.5 b=0 frame 0 vs 0.25 f1 + 0.75 f2: max err " + num(err) + " (gate 1e-12)");
}

// ---------------------------------------------------------------------------
// Prototype invariances

void prototype_invariances() {
  ModelConfig cfg;
  double worst_drift = 0.0, worst_excursion = 0.0;
  tensor::NoGradScope ng;
  for (std::uint64_t e = 0; e < 100; ++e) {
    std::mt19937_64 rng(500 + e);
    Model model(cfg, e);
    const auto& m = model.transformer();
    const auto ep = selftest::random_episode(cfg.way, 3, 5, cfg.frames, cfg.dim_in, rng);
    auto class_protos = [&](const std::vector<episodes::EmbeddingSequence>& support, const Tensor& qrows,
                            Tensor* values_out) {
      std::vector<Tensor> k, v;
      for (const auto& s : support) {
        const auto lv = m.levels(s.as_tensor());
        k.push_back(m.keys(lv).rows);
        v.push_back(m.values(lv).rows);
      }
      const Tensor values = tensor::concat(v, 0);
      if (values_out) *values_out = values;
      return mlt::prototype(m.attention_scores(qrows, tensor::concat(k, 0)), values);
    };
    for (const auto& q : ep.queries) {
      const Tensor qrows = m.queries(m.levels(q.sequence.as_tensor())).rows;
      for (std::size_t c = 0; c < cfg.way; ++c) {
        Tensor values;
        const Tensor base = class_protos(ep.support[c], qrows, &values);
        auto shuffled = ep.support[c];
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        std::reverse(shuffled.begin(), shuffled.end());
        const Tensor perm = class_protos(shuffled, qrows, nullptr);
        for (std::size_t i = 0; i < base.size(); ++i) worst_drift = std::max(worst_drift, std::abs(base[i] - perm[i]));
        for (std::size_t col = 0; col < values.dim(1); ++col) {
          double lo = values.at(0, col), hi = lo;
          for (std::size_t r = 1; r < values.dim(0); ++r) {
            lo = std::min(lo, values.at(r, col));
            hi = std::max(hi, values.at(r, col));
          }
          for (std::size_t r = 0; r < base.dim(0); ++r) {
            worst_excursion = std::max({worst_excursion, lo - base.at(r, col), base.at(r, col) - hi});
          }
        }
      }
    }
  }
  report(worst_drift <= 1e-12 && worst_excursion <= 1e-12, "prototype invariances",
         "100 episodes (5-way 3-shot, 5 queries): max permutation drift " + num(worst_drift) +
             ", max hull excursion " + num(std::max(worst_excursion, 0.0)) + " (gates 1e-12)");
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end

// Strict argmax accuracy over the eval episodes (ties count as errors).
double strict_accuracy(const Model& model, const RunConfig& cfg, const episodes::Dataset& data,
                       std::size_t n, std::uint64_t seed) {
  tensor::NoGradScope ng;
  double total = 0.0;
  for (std::size_t e = 0; e < n; ++e) {
    auto rng = eval_sampler(seed, e);
    const auto ep = episodes::sample_episode(data, cfg.model.way, cfg.shot, cfg.queries, rng);
    const auto res = model.forward(ep, false);
    double hits = 0.0;
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
      std::size_t best = 0;
      bool tie = false;
      for (std::size_t c = 1; c < cfg.model.way; ++c) {
        if (res.logits.at(q, c) > res.logits.at(q, best)) {
          best = c;
          tie = false;
        } else if (res.logits.at(q, c) == res.logits.at(q, best)) {
          tie = true;
        }
      }
      hits += (!tie && best == ep.queries[q].label) ? 1.0 : 0.0;
    }
    total += hits / static_cast<double>(ep.queries.size());
  }
  return total / static_cast<double>(n);
}

struct RunOutcome {
  double accuracy = 0.0;
  double ci95 = 0.0;
  double seconds = 0.0;
};

RunOutcome train_and_evaluate(RunConfig cfg) {
  const auto t0 = Clock::now();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  train(model, cfg, data.train);
  const auto ev = evaluate(model, cfg, data.eval, cfg.eval_episodes, cfg.seed);
  RunOutcome out{strict_accuracy(model, cfg, data.eval, cfg.eval_episodes, cfg.seed), ev.ci95,
                 seconds_since(t0)};
  return out;
}

void synthetic_end_to_end() {
  RunConfig cfg;  // 10 classes, M=8, D=64, pad 1..3, noise 0.1; full model with fusion loss
  cfg.train_episodes = 2000;
  cfg.eval_episodes = 500;
  const auto full = train_and_evaluate(cfg);
  report(full.accuracy >= 0.70 && full.seconds < 1800.0, "synthetic end-to-end",
         "5-way 1-shot, 2000 train / 500 eval episodes: accuracy " + num(full.accuracy * 100.0, 4) + "% +- " +
             num(full.ci95 * 100.0, 2) + " (gate 70%, chance 20%); " + num(full.seconds) + " s (gate 1800 s)");

  for (auto v : {metrics::LossVariant::kSequence, metrics::LossVariant::kOt}) {
    auto c = cfg;
    c.model.loss = v;
    const auto r = train_and_evaluate(c);
    info("ablation " + metrics::to_string(v), "accuracy " + num(r.accuracy * 100.0, 4) + "% +- " +
                                                  num(r.ci95 * 100.0, 2) + "; " + num(r.seconds) + " s");
  }
  info("ablation fusion", "accuracy " + num(full.accuracy * 100.0, 4) + "% (the gated run above)");
  auto no_tsa = cfg;
  no_tsa.model.tsa.enabled = false;
  const auto r = train_and_evaluate(no_tsa);
  info("fusion without alignment", "accuracy " + num(r.accuracy * 100.0, 4) + "% +- " +
                                       num(r.ci95 * 100.0, 2) + "; " + num(r.seconds) + " s");
}

// ---------------------------------------------------------------------------
// Ablation plumbing

std::vector<double> log_softmax_rows(const std::vector<double>& logits, std::size_t p, std::size_t n) {
  std::vector<double> out(p * n);
  for (std::size_t q = 0; q < p; ++q) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, logits[q * n + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(logits[q * n + c] - mx);
    for (std::size_t c = 0; c < n; ++c) out[q * n + c] = logits[q * n + c] - mx - std::log(s);
  }
  return out;
}

double cross_entropy(const std::vector<double>& logits, const std::vector<std::size_t>& labels, std::size_t n) {
  const auto lp = log_softmax_rows(logits, labels.size(), n);
  double s = 0.0;
  for (std::size_t q = 0; q < labels.size(); ++q) s -= lp[q * n + labels[q]];
  return s / static_cast<double>(labels.size());
}

void ablation_plumbing() {
  RunConfig cfg;
  const auto data = episodes::gen_synthetic(cfg.synth);
  std::mt19937_64 rng(31);
  const auto ep = episodes::sample_episode(data, 5, 1, 10, rng);
  const std::size_t n = 5, p = ep.queries.size();
  tensor::NoGradScope ng;

  auto build = [&](metrics::LossVariant v, bool tsa) {
    auto mc = cfg.model;
    mc.loss = v;
    mc.tsa.enabled = tsa;
    auto model = std::make_unique<Model>(mc, 5);
    std::mt19937_64 prng(8);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (auto& e : model->params().entries()) {  // nonzero fusion weights and alignment heads
      if (!e.trainable) continue;
      Tensor t = e.tensor;
      for (auto& x : t.mutable_data()) x += noise(prng) * (e.name.rfind("fusion", 0) == 0 ? 1.0 : 0.02);
    }
    return model;
  };
  auto values = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  auto negated = [](std::vector<double> v) {
    for (auto& x : v) x = -x;
    return v;
  };

  bool ok = true;
  std::string detail;
  for (bool tsa : {true, false}) {
    auto seq = build(metrics::LossVariant::kSequence, tsa);
    auto ot = build(metrics::LossVariant::kOt, tsa);
    auto fus = build(metrics::LossVariant::kFusion, tsa);

    const std::size_t calls_before = metrics::sinkhorn_invocations().load();
    const auto rs = seq->forward(ep, false);
    const std::size_t seq_calls = metrics::sinkhorn_invocations().load() - calls_before;
    const auto ro = ot->forward(ep, false);
    const auto rf = fus->forward(ep, false);

    // sequence: cross-entropy of -dis_seq; ot: of -dis_ot; fusion: of the fused scores.
    const double seq_gap = std::abs(rs.loss.item() - cross_entropy(negated(values(rs.dis_seq)), rs.labels, n));
    const double ot_gap = std::abs(ro.loss.item() - cross_entropy(negated(values(ro.dis_ot)), ro.labels, n));

    // Fusion oracle: [dis_ot ‖ dis_seq] -> linear -> leaky ReLU -> batch norm with running statistics.
    const auto& ps = fus->params();
    const auto W = values(ps.get("fusion.linear.weight")), b = values(ps.get("fusion.linear.bias"));
    const auto gamma = values(ps.get("fusion.bn.gamma")), beta = values(ps.get("fusion.bn.beta"));
    const auto mean = values(ps.get("fusion.bn.running_mean")), var = values(ps.get("fusion.bn.running_var"));
    const auto dot = values(rf.dis_ot), dseq = values(rf.dis_seq);
    std::vector<double> fused(p * n);
    for (std::size_t q = 0; q < p; ++q) {
      for (std::size_t c = 0; c < n; ++c) {
        double z = b[c];
        for (std::size_t j = 0; j < n; ++j) z += W[c * 2 * n + j] * dot[q * n + j] + W[c * 2 * n + n + j] * dseq[q * n + j];
        z = z > 0.0 ? z : 0.01 * z;
        fused[q * n + c] = gamma[c] * (z - mean[c]) / std::sqrt(var[c] + 1e-5) + beta[c];
      }
    }
    const double fus_gap = std::abs(rf.loss.item() - cross_entropy(fused, rf.labels, n));

    // The three variants share the distance computations they have in common.
    const bool shared = values(rs.dis_seq) == values(rf.dis_seq) && values(ro.dis_ot) == values(rf.dis_ot);
    const bool isolated = seq_calls == 0 && rs.sinkhorn_calls == 0 && !rs.dis_ot.defined() &&
                          !ro.dis_seq.defined() && ro.sinkhorn_calls == p * n && rf.sinkhorn_calls == p * n;
    const double gap = std::max({seq_gap, ot_gap, fus_gap});
    ok = ok && gap < 1e-12 && shared && isolated;
    detail += std::string(tsa ? "tsa on" : "tsa off") + ": loss gaps " + num(gap) +
              ", sinkhorn calls seq/ot/fusion " + std::to_string(seq_calls) + "/" +
              std::to_string(ro.sinkhorn_calls) + "/" + std::to_string(rf.sinkhorn_calls) + "; ";
  }
  // Training under sequence-only never reaches the OT path either.
  RunConfig tc;
  tc.model.loss = metrics::LossVariant::kSequence;
  tc.model.tsa.enabled = false;
  tc.train_episodes = 32;
  const auto tdata = load_run_data(tc);
  Model model(tc.model, tc.seed);
  const std::size_t before = metrics::sinkhorn_invocations().load();
  const auto tr = train(model, tc, tdata.train);
  const bool train_isolated = tr.sinkhorn_calls == 0 && metrics::sinkhorn_invocations().load() == before;
  ok = ok && train_isolated;
  detail += std::string("32 sequence-only training episodes ran Sinkhorn ") +
            std::to_string(metrics::sinkhorn_invocations().load() - before) + " times";
  report(ok, "ablation plumbing", detail);
}

}  // namespace

int main() {
  std::printf("tsamlt acceptance\n");
  gradient_integrity();
  ot_correctness();
  combinatorics();
  warp_identity();
  prototype_invariances();
  ablation_plumbing();
  synthetic_end_to_end();
  std::printf("%s: %d criterion(s) failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
