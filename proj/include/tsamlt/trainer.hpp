#pragma once

// Episodic training (SGD with gradient accumulation) and multi-threaded
// evaluation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tsamlt/config.hpp"
#include "tsamlt/errors.hpp"
#include "tsamlt/model.hpp"
#include "tsamlt/tsae.hpp"

namespace tsamlt {

struct TrainRecord {
  std::size_t episode = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> history;
  std::size_t steps = 0;
  std::size_t sinkhorn_calls = 0;
  std::string rng_state;  // episode sampler state after the last episode
};

struct EvalResult {
  std::vector<double> accuracies;  // indexed by episode number
  double mean = 0.0;
  double ci95 = 0.0;  // half-width of the normal 95% interval
  std::size_t sinkhorn_calls = 0;
};

inline double learning_rate(const RunConfig& cfg, std::size_t episode) {
  return episode < cfg.train_episodes / 2 ? cfg.lr : cfg.lr_final;
}

/// Datasets a run draws its episodes from.
struct RunData {
  episodes::Dataset train;
  episodes::Dataset eval;
};

inline RunData load_run_data(const RunConfig& cfg) {
  RunData d;
  if (cfg.train_data.empty()) {
    auto spec = cfg.synth;
    d.train = episodes::gen_synthetic(spec);
    spec.seed = cfg.eval_synth_seed;
    d.eval = episodes::gen_synthetic(spec);
  } else {
    d.train = tsae::load_embeddings(cfg.train_data);
    d.eval = cfg.eval_data.empty() ? d.train : tsae::load_embeddings(cfg.eval_data);
  }
  return d;
}

inline std::mt19937_64 train_sampler(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x7472u};
  return std::mt19937_64(seq);
}

inline std::mt19937_64 eval_sampler(std::uint64_t seed, std::size_t episode) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(episode),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(episode) >> 32)};
  return std::mt19937_64(seq);
}

/// Trains `model` in place. Gradients are summed over `accumulate`
/// consecutive episodes, then one step with their mean is taken; a trailing
/// partial window is averaged over its own size.
inline TrainResult train(Model& model, const RunConfig& cfg, const episodes::Dataset& data,
                         const std::function<void(const TrainRecord&)>& on_episode = {}) {
  cfg.validate();
  TrainResult out;
  std::mt19937_64 rng = train_sampler(cfg.seed);
  std::ofstream log;
  if (!cfg.log.empty()) {
    log.open(cfg.log);
    if (!log) throw ConfigError("train: cannot open log " + cfg.log);
    log << "episode,loss,accuracy\n";
    log.precision(10);
  }

  auto& params = model.params();
  params.zero_grad();
  std::size_t pending = 0;
  for (std::size_t e = 0; e < cfg.train_episodes; ++e) {
    const auto ep = episodes::sample_episode(data, cfg.model.way, cfg.shot, cfg.queries, rng);
    tensor::Tape tape;
    EpisodeResult res;
    {
      tensor::TapeScope scope(tape);
      res = model.forward(ep, true);
    }
    tape.backward(res.loss);
    ++pending;
    out.sinkhorn_calls += res.sinkhorn_calls;

    const bool last = e + 1 == cfg.train_episodes;
    if (pending == cfg.accumulate || last) {
      params.sgd_step(learning_rate(cfg, e), 1.0 / static_cast<double>(pending));
      params.zero_grad();
      pending = 0;
      ++out.steps;
    }

    const TrainRecord rec{e, res.loss.item(), res.accuracy};
    out.history.push_back(rec);
    if (log) log << rec.episode << ',' << rec.loss << ',' << rec.accuracy << '\n';
    if (on_episode) on_episode(rec);
  }
  std::ostringstream st;
  st << rng;
  out.rng_state = st.str();
  return out;
}

inline void summarize(EvalResult& r) {
  const double n = static_cast<double>(r.accuracies.size());
  if (r.accuracies.empty()) return;
  double sum = 0.0;
  for (double a : r.accuracies) sum += a;
  r.mean = sum / n;
  if (r.accuracies.size() < 2) {
    r.ci95 = 0.0;
    return;
  }
  double ss = 0.0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

/// Evaluates on `episodes` episodes with batch norm in inference mode.
/// Episode e is drawn from its own generator seeded by (seed, e), so the
/// result does not depend on the thread count or the processing order.
/// `order` optionally permutes the processing order.
inline EvalResult evaluate(const Model& model, const RunConfig& cfg, const episodes::Dataset& data,
                           std::size_t n_episodes, std::uint64_t seed,
                           const std::vector<std::size_t>& order = {}) {
  cfg.validate();
  if (!order.empty() && order.size() != n_episodes) {
    throw ConfigError("evaluate: order must list every episode once");
  }
  EvalResult out;
  out.accuracies.assign(n_episodes, 0.0);
  std::vector<std::size_t> calls(n_episodes, 0);

  std::size_t threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n_episodes));

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  auto worker = [&](std::size_t id) {
    try {
      tensor::NoGradScope no_grad;
      for (std::size_t i = next++; i < n_episodes; i = next++) {
        const std::size_t e = order.empty() ? i : order[i];
        auto rng = eval_sampler(seed, e);
        const auto ep = episodes::sample_episode(data, cfg.model.way, cfg.shot, cfg.queries, rng);
        const auto res = model.forward(ep, false);
        out.accuracies[e] = res.accuracy;
        calls[e] = res.sinkhorn_calls;
      }
    } catch (...) {
      errors[id] = std::current_exception();
      next = n_episodes;
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker, t);
  worker(0);
  for (auto& t : pool) t.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);

  for (auto c : calls) out.sinkhorn_calls += c;
  summarize(out);
  return out;
}

}  // namespace tsamlt
