// Command-line front end: train, eval, selftest, gen-synth.

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "tsamlt/tsamlt.hpp"

namespace {

using namespace tsamlt;

// Settings shared by the subcommands. Unset flags leave the configuration
// file (or the defaults) in charge.
struct Flags {
  std::string config;
  std::optional<std::string> way, shot, queries, frames, dim, cardinalities, tuple_reps, loss,
      epsilon, seed, episodes, data, threads;
  bool no_tsa = false;
  std::vector<std::string> sets;
  std::string out, log, checkpoint;
};

void add_model_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value configuration file");
  cmd->add_option("--way", f.way, "classes per episode");
  cmd->add_option("--shot", f.shot, "support videos per class");
  cmd->add_option("--queries", f.queries, "query videos per episode");
  cmd->add_option("--frames", f.frames, "frames per video");
  cmd->add_option("--dim", f.dim, "feature dimension");
  cmd->add_option("--cardinalities", f.cardinalities, "tuple cardinalities, e.g. 1,2,3,4");
  cmd->add_option("--tuple-reps", f.tuple_reps, "reduced tuples per cardinality, e.g. 8,4,3,2");
  cmd->add_option("--loss", f.loss, "fusion | sequence | ot");
  cmd->add_flag("--no-tsa", f.no_tsa, "disable temporal alignment");
  cmd->add_option("--epsilon", f.epsilon, "Sinkhorn entropic regularization");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--data", f.data, "TSAE feature file (default: synthetic data)");
  cmd->add_option("--threads", f.threads, "evaluation threads (0 = all cores)");
  cmd->add_option("--set", f.sets, "extra key=value setting, repeatable");
}

RunConfig build_config(const Flags& f, const std::string& episodes_key) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  auto apply = [&](const char* key, const std::optional<std::string>& v) {
    if (v) set_option(cfg, key, *v);
  };
  apply("way", f.way);
  apply("shot", f.shot);
  apply("queries", f.queries);
  apply("frames", f.frames);
  apply("dim", f.dim);
  apply("mlt.cardinalities", f.cardinalities);
  apply("mlt.tuple_reps", f.tuple_reps);
  apply("loss.variant", f.loss);
  apply("ot.epsilon", f.epsilon);
  apply("seed", f.seed);
  apply("data.train", f.data);
  apply("threads", f.threads);
  apply(episodes_key.c_str(), f.episodes);
  if (f.no_tsa) cfg.model.tsa.enabled = false;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_option(cfg, config_detail::trim(s.substr(0, eq)), s.substr(eq + 1));
  }
  return cfg;
}

// Datasets from TSAE files define frames and feature dimension.
void adopt_data_shape(RunConfig& cfg, const RunData& data) {
  if (cfg.train_data.empty()) return;
  cfg.model.frames = data.train.frames;
  cfg.model.dim_in = data.train.dim;
}

void print_eval(const EvalResult& r, std::size_t n) {
  std::cout << std::fixed << std::setprecision(4) << "accuracy " << r.mean << " +- " << r.ci95
            << " (95% CI, " << n << " episodes)\n";
}

int run_train(const Flags& f) {
  RunConfig cfg = build_config(f, "train.episodes");
  if (!f.log.empty()) cfg.log = f.log;
  if (!f.out.empty()) cfg.checkpoint = f.out;
  if (cfg.checkpoint.empty()) cfg.checkpoint = "tsamlt.ckpt";
  const RunData data = load_run_data(cfg);
  adopt_data_shape(cfg, data);
  cfg.validate();

  Model model(cfg.model, cfg.seed);
  const bool to_stdout = cfg.log.empty();
  if (to_stdout) std::cout << "episode,loss,accuracy\n" << std::setprecision(10);
  const auto result = train(model, cfg, data.train, [&](const TrainRecord& r) {
    if (to_stdout) std::cout << r.episode << ',' << r.loss << ',' << r.accuracy << '\n';
  });
  checkpoint::save(cfg.checkpoint, checkpoint::capture(model, cfg, result.rng_state));
  std::cerr << "trained " << cfg.train_episodes << " episodes (" << result.steps
            << " SGD steps); checkpoint written to " << cfg.checkpoint << "\n";
  return 0;
}

int run_eval(const Flags& f) {
  std::unique_ptr<Model> model;
  RunConfig cfg;
  if (!f.checkpoint.empty()) {
    const auto ck = checkpoint::load(f.checkpoint);
    cfg = ck.config();
    model = checkpoint::restore(ck);
    // Only data and evaluation settings may change after training.
    if (f.episodes) set_option(cfg, "eval.episodes", *f.episodes);
    if (f.data) set_option(cfg, "data.eval", *f.data);
    if (f.threads) set_option(cfg, "threads", *f.threads);
  } else {
    cfg = build_config(f, "eval.episodes");
  }
  RunData data = load_run_data(cfg);
  if (!model) {
    adopt_data_shape(cfg, data);
    model = std::make_unique<Model>(cfg.model, cfg.seed);
  }
  const auto r = evaluate(*model, cfg, data.eval, cfg.eval_episodes, cfg.seed);
  print_eval(r, cfg.eval_episodes);
  return 0;
}

int run_selftest(std::size_t seeds, const selftest::Faults& faults) {
  selftest::Options opts;
  opts.seeds = seeds;
  opts.faults = faults;
  const auto props = selftest::run(opts);
  for (const auto& p : props) {
    std::cout << (p.pass ? "PASS " : "FAIL ") << p.name << ": " << p.detail << "\n";
  }
  const bool ok = selftest::all_pass(props);
  std::cout << (ok ? "all properties pass" : "some properties FAILED") << "\n";
  return ok ? 0 : 1;
}

int run_gen_synth(const Flags& f) {
  RunConfig cfg = build_config(f, "train.episodes");
  if (f.out.empty()) throw ConfigError("gen-synth: --out is required");
  cfg.synth.validate();
  const auto data = episodes::gen_synthetic(cfg.synth);
  tsae::write_tsae(f.out, data);
  std::cerr << "wrote " << data.videos.size() << " videos (" << data.frames << "x" << data.dim
            << ") to " << f.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot action recognition with temporal alignment and multi-level prototypes"};
  app.require_subcommand(1);

  Flags train_flags, eval_flags, synth_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model on episodes");
  add_model_flags(train_cmd, train_flags);
  train_cmd->add_option("--episodes", train_flags.episodes, "training episodes");
  train_cmd->add_option("--out", train_flags.out, "checkpoint path");
  train_cmd->add_option("--log", train_flags.log, "CSV log path (default stdout)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or a fresh model)");
  add_model_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--episodes", eval_flags.episodes, "evaluation episodes");
  eval_cmd->add_option("--checkpoint", eval_flags.checkpoint, "checkpoint to evaluate");

  std::size_t seeds = 10;
  selftest::Faults faults;
  auto* self_cmd = app.add_subcommand("selftest", "run the built-in property suite");
  self_cmd->add_option("--seeds", seeds, "random seeds per property");
  self_cmd->add_flag("--fault-softmax-axis", faults.softmax_wrong_axis,
                     "inject: attention softmax over the wrong axis");
  self_cmd->add_flag("--fault-warp-zeros", faults.warp_zero_padding,
                     "inject: zero padding instead of border clamping in the warp");

  auto* synth_cmd = app.add_subcommand("gen-synth", "write a synthetic dataset as TSAE");
  add_model_flags(synth_cmd, synth_flags);
  synth_cmd->add_option("--out", synth_flags.out, "output TSAE path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return run_train(train_flags);
    if (*eval_cmd) return run_eval(eval_flags);
    if (*self_cmd) return run_selftest(seeds, faults);
    if (*synth_cmd) return run_gen_synth(synth_flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
