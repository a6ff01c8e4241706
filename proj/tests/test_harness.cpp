#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tsamlt/tsamlt.hpp"

using namespace tsamlt;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("tsamlt_harness_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

RunConfig quick_config() {
  RunConfig c;
  c.train_episodes = 8;
  c.eval_episodes = 20;
  c.accumulate = 4;
  c.threads = 2;
  return c;
}

std::string serialize(const checkpoint::Checkpoint& ck) {
  std::ostringstream os;
  checkpoint::write(os, ck);
  return os.str();
}

std::vector<double> flat_values(const Model& m) {
  std::vector<double> out;
  for (const auto& e : m.params().entries()) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParsesSectionsCommentsAndLists) {
  RunConfig c;
  parse_config_text(c, R"(
# desk run
way = 3
shot=2   # inline comment
[mlt]
cardinalities = 1, 2, 3
tuple_reps = 8,4,3
[ot]
epsilon = 0.2
[loss]
variant = sequence
[tsa]
enabled = off
)");
  EXPECT_EQ(c.model.way, 3u);
  EXPECT_EQ(c.shot, 2u);
  EXPECT_EQ(c.model.mlt.levels.cardinalities, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(c.model.mlt.levels.tuple_reps, (std::vector<std::size_t>{8, 4, 3}));
  EXPECT_DOUBLE_EQ(c.model.ot.epsilon, 0.2);
  EXPECT_EQ(c.model.loss, metrics::LossVariant::kSequence);
  EXPECT_FALSE(c.model.tsa.enabled);
}

TEST(Config, FramesAndDimFeedModelAndGenerator) {
  RunConfig c;
  set_option(c, "frames", "6");
  set_option(c, "dim", "16");
  EXPECT_EQ(c.model.frames, 6u);
  EXPECT_EQ(c.synth.frames, 6u);
  EXPECT_EQ(c.model.dim_in, 16u);
  EXPECT_EQ(c.synth.dim, 16u);
}

TEST(Config, MalformedInputThrows) {
  RunConfig c;
  EXPECT_THROW(set_option(c, "nonsense", "1"), ConfigError);
  EXPECT_THROW(set_option(c, "way", "five"), ConfigError);
  EXPECT_THROW(set_option(c, "way", "-2"), ConfigError);
  EXPECT_THROW(set_option(c, "ot.epsilon", "0.1x"), ConfigError);
  EXPECT_THROW(set_option(c, "tsa.enabled", "maybe"), ConfigError);
  EXPECT_THROW(set_option(c, "loss.variant", "hinge"), ConfigError);
  EXPECT_THROW(parse_config_text(c, "way 5\n"), ConfigError);
  EXPECT_THROW(parse_config_text(c, "[mlt\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/dir/run.cfg"), ConfigError);
}

TEST(Config, InvariantsAreEnforced) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.model.way = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.shot = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.accumulate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.mlt.levels.tuple_reps = {8, 4, 3, 99};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, CanonicalTextRoundTripsWithSameHash) {
  RunConfig c;
  set_option(c, "way", "3");
  set_option(c, "mlt.cardinalities", "1,2,3,4,5");
  set_option(c, "mlt.tuple_reps", "8,4,3,2,1");
  set_option(c, "ot.epsilon", "0.037");
  set_option(c, "train.lr", "0.00123456789");
  RunConfig back;
  parse_config_text(back, c.canonical());
  EXPECT_EQ(back.canonical(), c.canonical());
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(Config, HashTracksSettings) {
  RunConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 2;
  EXPECT_NE(a.hash(), b.hash());
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, ZeroEpisodesLeavesInitialization) {
  auto cfg = quick_config();
  cfg.train_episodes = 0;
  const auto data = load_run_data(cfg);
  Model trained(cfg.model, cfg.seed), fresh(cfg.model, cfg.seed);
  const auto r = train(trained, cfg, data.train);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(serialize(checkpoint::capture(trained, cfg, "")),
            serialize(checkpoint::capture(fresh, cfg, "")));
}

TEST(Train, StepAveragesGradientsOverWindow) {
  auto cfg = quick_config();
  cfg.train_episodes = 3;
  cfg.accumulate = 3;
  cfg.lr = cfg.lr_final = 0.05;
  const auto data = load_run_data(cfg);

  // Oracle: per-episode gradients at the initial parameters, one averaged step.
  Model reference(cfg.model, cfg.seed);
  auto rng = train_sampler(cfg.seed);
  std::vector<double> expected = flat_values(reference);
  std::vector<double> mean_grad(expected.size(), 0.0);
  for (int e = 0; e < 3; ++e) {
    const auto ep = episodes::sample_episode(data.train, cfg.model.way, cfg.shot, cfg.queries, rng);
    reference.params().zero_grad();
    tensor::Tape tape;
    EpisodeResult res;
    {
      tensor::TapeScope scope(tape);
      res = reference.forward(ep, true);
    }
    tape.backward(res.loss);
    std::size_t k = 0;
    for (const auto& entry : reference.params().entries()) {
      for (std::size_t i = 0; i < entry.tensor.size(); ++i, ++k) {
        if (entry.trainable && entry.tensor.has_grad()) mean_grad[k] += entry.tensor.grad()[i] / 3.0;
      }
    }
  }
  std::size_t k = 0;
  const auto running = flat_values(reference);  // batch-norm statistics after three updates
  for (const auto& entry : reference.params().entries()) {
    for (std::size_t i = 0; i < entry.tensor.size(); ++i, ++k) {
      expected[k] = entry.trainable ? expected[k] - cfg.lr * mean_grad[k] : running[k];
    }
  }

  Model model(cfg.model, cfg.seed);
  const auto r = train(model, cfg, data.train);
  EXPECT_EQ(r.steps, 1u);
  const auto got = flat_values(model);
  ASSERT_EQ(got.size(), expected.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expected[i]));
  EXPECT_LT(worst, 1e-12);
}

TEST(Train, PartialFinalWindowStillSteps) {
  auto cfg = quick_config();
  cfg.train_episodes = 5;
  cfg.accumulate = 4;
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  EXPECT_EQ(train(model, cfg, data.train).steps, 2u);
}

TEST(Train, LearningRateDropsAfterHalf) {
  RunConfig cfg;
  cfg.train_episodes = 10;
  EXPECT_EQ(learning_rate(cfg, 0), 1e-3);
  EXPECT_EQ(learning_rate(cfg, 4), 1e-3);
  EXPECT_EQ(learning_rate(cfg, 5), 1e-4);
  EXPECT_EQ(learning_rate(cfg, 9), 1e-4);
}

TEST(Train, IdenticalSeedsGiveIdenticalCheckpoints) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model a(cfg.model, cfg.seed), b(cfg.model, cfg.seed);
  const auto ra = train(a, cfg, data.train);
  const auto rb = train(b, cfg, data.train);
  EXPECT_EQ(serialize(checkpoint::capture(a, cfg, ra.rng_state)),
            serialize(checkpoint::capture(b, cfg, rb.rng_state)));
  for (std::size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);

  cfg.seed = 9;
  Model c(cfg.model, cfg.seed);
  const auto rc = train(c, cfg, data.train);
  EXPECT_NE(flat_values(a), flat_values(c));
  EXPECT_NE(ra.history.back().loss, rc.history.back().loss);
}

TEST(Train, LossDecreasesFromFirstToFiftiethWindow) {
  RunConfig cfg;  // synthetic 5-way 1-shot defaults
  cfg.train_episodes = 50 * cfg.accumulate;
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  const auto r = train(model, cfg, data.train);
  auto window_mean = [&](std::size_t w) {
    double s = 0.0;
    for (std::size_t e = w * cfg.accumulate; e < (w + 1) * cfg.accumulate; ++e) s += r.history[e].loss;
    return s / static_cast<double>(cfg.accumulate);
  };
  const double first = window_mean(0), last = window_mean(49);
  EXPECT_LT(last, first) << "window 1 " << first << ", window 50 " << last;
  // Smoothed trend: each block of ten windows beats the first block.
  auto block_mean = [&](std::size_t b) {
    double s = 0.0;
    for (std::size_t w = 10 * b; w < 10 * b + 10; ++w) s += window_mean(w);
    return s / 10.0;
  };
  for (std::size_t b = 1; b < 5; ++b) EXPECT_LT(block_mean(b), block_mean(0)) << "block " << b;
}

TEST(Train, WritesCsvLog) {
  TempDir dir;
  auto cfg = quick_config();
  cfg.train_episodes = 3;
  cfg.log = dir.file("log.csv");
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  train(model, cfg, data.train);
  std::ifstream is(cfg.log);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "episode,loss,accuracy");
  EXPECT_EQ(lines[1].rfind("0,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("2,", 0), 0u);
}

TEST(Train, DatasetTooSmallForEpisodeThrows) {
  auto cfg = quick_config();
  cfg.synth.classes = 4;
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  EXPECT_THROW(train(model, cfg, data.train), ConfigError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, UntrainedModelIsAtChance) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  const auto r = evaluate(model, cfg, data.eval, 200, 3);
  EXPECT_LE(std::abs(r.mean - 0.2), std::max(r.ci95, 1e-12)) << r.mean << " +- " << r.ci95;
}

TEST(Evaluate, ResultIndependentOfEpisodeOrderAndThreads) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  train(model, cfg, data.train);
  const std::size_t n = 24;
  cfg.threads = 1;
  const auto forward = evaluate(model, cfg, data.eval, n, 5);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  cfg.threads = 3;
  const auto reversed = evaluate(model, cfg, data.eval, n, 5, order);
  EXPECT_EQ(forward.accuracies, reversed.accuracies);
  EXPECT_EQ(forward.mean, reversed.mean);
}

TEST(Evaluate, SharedTemplateTwoWayIsAtChance) {
  RunConfig cfg;
  cfg.model.way = 2;
  cfg.queries = 4;
  cfg.synth.shared_template = true;
  cfg.model.loss = metrics::LossVariant::kSequence;  // no tie-splitting at initialization
  cfg.train_episodes = 32;
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  train(model, cfg, data.train);
  const auto r = evaluate(model, cfg, data.eval, 400, 11);
  EXPECT_LE(std::abs(r.mean - 0.5), r.ci95) << r.mean << " +- " << r.ci95;
}

TEST(Evaluate, ConfidenceIntervalIsNormalApproximation) {
  EvalResult r;
  r.accuracies = {0.0, 1.0, 1.0, 0.0};
  summarize(r);
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
  const double sd = std::sqrt(1.0 / 3.0);  // sample sd of {0,1,1,0}
  EXPECT_NEAR(r.ci95, 1.96 * sd / 2.0, 1e-15);
}

TEST(Evaluate, IncompatibleShapesThrow) {
  auto cfg = quick_config();
  Model model(cfg.model, cfg.seed);
  auto spec = cfg.synth;
  spec.dim = 32;
  const auto other = episodes::gen_synthetic(spec);
  EXPECT_THROW(evaluate(model, cfg, other, 2, 1), ShapeError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripReproducesEvaluationBitExactly) {
  TempDir dir;
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  const auto tr = train(model, cfg, data.train);
  const auto before = evaluate(model, cfg, data.eval, 12, 8);

  checkpoint::save(dir.file("m.ckpt"), checkpoint::capture(model, cfg, tr.rng_state));
  const auto ck = checkpoint::load(dir.file("m.ckpt"));
  EXPECT_EQ(ck.rng_state, tr.rng_state);
  EXPECT_EQ(ck.config_hash, cfg.hash());
  const auto restored = checkpoint::restore(ck);
  const auto after = evaluate(*restored, ck.config(), data.eval, 12, 8);
  EXPECT_EQ(before.accuracies, after.accuracies);

  std::mt19937_64 r1(4), r2(4);
  const auto e1 = episodes::sample_episode(data.eval, 5, 1, 5, r1);
  const auto e2 = episodes::sample_episode(data.eval, 5, 1, 5, r2);
  tensor::NoGradScope no_grad;
  const auto a = model.forward(e1, false), b = restored->forward(e2, false);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_EQ(a.logits[i], b.logits[i]);
}

TEST(Checkpoint, StoresBatchNormRunningStatistics) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  train(model, cfg, data.train);
  const auto ck = checkpoint::capture(model, cfg, "");
  bool found = false;
  for (const auto& e : ck.entries) {
    if (e.name == "fusion.bn.running_mean") {
      found = true;
      EXPECT_FALSE(e.trainable);
      EXPECT_TRUE(std::any_of(e.values.begin(), e.values.end(), [](double v) { return v != 0.0; }));
    }
  }
  EXPECT_TRUE(found);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  auto cfg = quick_config();
  Model model(cfg.model, cfg.seed);
  const std::string bytes = serialize(checkpoint::capture(model, cfg, "state"));
  auto read = [](const std::string& s) {
    std::istringstream is(s);
    return checkpoint::read(is);
  };
  EXPECT_NO_THROW(read(bytes));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(read(bad), FormatError);
  bad = bytes;
  bad[4] = 2;  // version
  EXPECT_THROW(read(bad), FormatError);
  EXPECT_THROW(read(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(read(bytes + "x"), FormatError);
  bad = bytes;
  const auto pos = bad.find("way = 5");
  ASSERT_NE(pos, std::string::npos);
  bad[pos + 6] = '4';  // edits the config without updating its hash
  EXPECT_THROW(read(bad), FormatError);
  EXPECT_THROW(checkpoint::load("/nonexistent/m.ckpt"), FormatError);
}

TEST(Checkpoint, MismatchedModelIsRejected) {
  auto cfg = quick_config();
  Model model(cfg.model, cfg.seed);
  const auto ck = checkpoint::capture(model, cfg, "");
  auto other_cfg = cfg.model;
  other_cfg.mlt.dim_v = 32;
  Model other(other_cfg, cfg.seed);
  EXPECT_THROW(checkpoint::apply(ck, other), ShapeError);
}

// ---------------------------------------------------------------------------
// Ablations and the episode pipeline

TEST(Ablation, SequenceWithoutAlignmentNeverRunsSinkhorn) {
  auto cfg = quick_config();
  cfg.model.loss = metrics::LossVariant::kSequence;
  cfg.model.tsa.enabled = false;
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  const std::size_t before = metrics::sinkhorn_invocations().load();
  const auto tr = train(model, cfg, data.train);
  const auto ev = evaluate(model, cfg, data.eval, 6, 1);
  EXPECT_EQ(tr.sinkhorn_calls, 0u);
  EXPECT_EQ(ev.sinkhorn_calls, 0u);
  EXPECT_EQ(metrics::sinkhorn_invocations().load(), before);

  std::mt19937_64 rng(1);
  const auto ep = episodes::sample_episode(data.eval, 5, 1, 5, rng);
  tensor::NoGradScope no_grad;
  const auto res = model.forward(ep, false);
  EXPECT_FALSE(res.dis_ot.defined());
  EXPECT_TRUE(res.dis_seq.defined());
  EXPECT_FALSE(res.theta.defined());
}

TEST(Ablation, VariantsComputeOnlyTheirDistances) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  std::mt19937_64 rng(2);
  const auto ep = episodes::sample_episode(data.eval, 5, 1, 5, rng);
  tensor::NoGradScope no_grad;
  for (auto v : {metrics::LossVariant::kOt, metrics::LossVariant::kFusion}) {
    cfg.model.loss = v;
    Model model(cfg.model, cfg.seed);
    const auto res = model.forward(ep, false);
    EXPECT_TRUE(res.dis_ot.defined());
    EXPECT_EQ(res.dis_seq.defined(), v == metrics::LossVariant::kFusion);
    EXPECT_EQ(res.sinkhorn_calls, 25u);
    EXPECT_TRUE(res.theta.defined());
  }
}

TEST(Model, OutputShapesAndProbabilities) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  std::mt19937_64 rng(3);
  const auto ep = episodes::sample_episode(data.eval, 5, 1, 7, rng);
  tensor::NoGradScope no_grad;
  const auto res = model.forward(ep, false);
  EXPECT_EQ(res.logits.shape(), (tensor::Shape{7, 5}));
  for (std::size_t q = 0; q < 7; ++q) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += res.probabilities.at(q, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_NEAR(res.loss.item(), std::log(5.0), 1e-12);  // zero-initialized fusion: uniform
}

TEST(Model, WrongWayOrShapeThrows) {
  auto cfg = quick_config();
  const auto data = load_run_data(cfg);
  Model model(cfg.model, cfg.seed);
  std::mt19937_64 rng(3);
  tensor::NoGradScope no_grad;
  EXPECT_THROW(model.forward(episodes::sample_episode(data.eval, 3, 1, 3, rng), false), ConfigError);
  auto ep = episodes::sample_episode(data.eval, 5, 1, 5, rng);
  ep.queries[0].sequence.frames = 7;
  EXPECT_THROW(model.forward(ep, false), ShapeError);
}

TEST(Model, EpisodeLossGradientMatchesFiniteDifferences) {
  for (auto v : {metrics::LossVariant::kFusion, metrics::LossVariant::kSequence,
                 metrics::LossVariant::kOt}) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      worst = std::max(worst, selftest::episode_gradient(seed, v).rel_error);
    }
    EXPECT_LT(worst, 1e-3) << metrics::to_string(v);
  }
}

// ---------------------------------------------------------------------------
// Self-test suite

TEST(Selftest, FreshBuildPassesEveryProperty) {
  selftest::Options opts;
  opts.seeds = 3;
  const auto props = selftest::run(opts);
  for (const auto& p : props) EXPECT_TRUE(p.pass) << p.name << ": " << p.detail;
  EXPECT_TRUE(selftest::all_pass(props));
}

namespace {
const selftest::Property& find(const std::vector<selftest::Property>& props, const std::string& name) {
  for (const auto& p : props)
    if (p.name == name) return p;
  throw std::runtime_error("no property " + name);
}
}  // namespace

TEST(Selftest, WrongSoftmaxAxisFailsAttentionSimplex) {
  selftest::Options opts;
  opts.seeds = 3;
  opts.faults.softmax_wrong_axis = true;
  const auto props = selftest::run(opts);
  EXPECT_FALSE(find(props, "attention simplex").pass);
  EXPECT_TRUE(find(props, "warp identity").pass);
  EXPECT_FALSE(selftest::all_pass(props));
}

TEST(Selftest, ZeroPaddingWarpKeepsIdentityButFailsBorderClamp) {
  selftest::Options opts;
  opts.seeds = 3;
  opts.faults.warp_zero_padding = true;
  const auto props = selftest::run(opts);
  EXPECT_TRUE(find(props, "warp identity").pass);
  EXPECT_TRUE(find(props, "warp interpolation example").pass);
  EXPECT_FALSE(find(props, "warp border clamp example").pass);
  EXPECT_TRUE(find(props, "attention simplex").pass);
}
