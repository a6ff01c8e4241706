#pragma once

// Run configuration: key=value text with optional [section] headers.
//
//   # comment
//   way = 5
//   [mlt]
//   cardinalities = 1,2,3,4     -> key "mlt.cardinalities"

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tsamlt/episodes.hpp"
#include "tsamlt/errors.hpp"
#include "tsamlt/model.hpp"

namespace tsamlt {

struct RunConfig {
  ModelConfig model;
  std::size_t shot = 1;
  std::size_t queries = 5;

  episodes::SyntheticSpec synth;
  std::uint64_t eval_synth_seed = 2;  // novel classes for evaluation
  std::string train_data;             // TSAE file; empty = synthetic
  std::string eval_data;              // defaults to train_data

  std::size_t train_episodes = 2000;
  std::size_t eval_episodes = 1000;
  std::size_t accumulate = 16;
  double lr = 1e-3;
  double lr_final = 1e-4;

  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0 = hardware concurrency
  std::string checkpoint;
  std::string log;

  void validate() const {
    if (model.way < 2) throw ConfigError("config: way must be >= 2");
    if (shot < 1) throw ConfigError("config: shot must be >= 1");
    if (queries < 1) throw ConfigError("config: queries must be >= 1");
    if (accumulate < 1) throw ConfigError("config: train.accumulate must be >= 1");
    if (!(lr >= 0.0) || !(lr_final >= 0.0)) throw ConfigError("config: learning rates must be >= 0");
    if (train_data.empty()) synth.validate();
    model.validate();
  }

  /// Canonical text of every setting that affects the model or the data.
  std::string canonical() const;
  std::uint64_t hash() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + " expects on/off, got '" + v + "'");
}

inline std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, trim(item)));
  if (out.empty()) throw ConfigError("config: " + key + " expects a comma-separated list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace config_detail

/// Applies one setting. Unknown keys are an error.
inline void set_option(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace config_detail;
  const std::string v = trim(value);
  auto& m = c.model;
  if (key == "way") m.way = to_size(key, v);
  else if (key == "shot") c.shot = to_size(key, v);
  else if (key == "queries") c.queries = to_size(key, v);
  else if (key == "frames") m.frames = c.synth.frames = to_size(key, v);
  else if (key == "dim") m.dim_in = c.synth.dim = to_size(key, v);
  else if (key == "seed") c.seed = to_size(key, v);
  else if (key == "threads") c.threads = to_size(key, v);
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "log") c.log = v;
  else if (key == "tsa.enabled") m.tsa.enabled = to_bool(key, v);
  else if (key == "tsa.conv_channels") m.tsa.conv_channels = to_list(key, v);
  else if (key == "tsa.kernel") m.tsa.kernel = to_size(key, v);
  else if (key == "tsa.task_hidden") m.tsa.task_hidden = to_size(key, v);
  else if (key == "tsa.init_identity") m.tsa.init_identity = to_bool(key, v);
  else if (key == "mlt.cardinalities") m.mlt.levels.cardinalities = to_list(key, v);
  else if (key == "mlt.tuple_reps") m.mlt.levels.tuple_reps = to_list(key, v);
  else if (key == "mlt.dim_model") m.mlt.dim_model = to_size(key, v);
  else if (key == "mlt.dim_k") m.mlt.dim_k = to_size(key, v);
  else if (key == "mlt.dim_v") m.mlt.dim_v = to_size(key, v);
  else if (key == "mlt.pe") m.mlt.positional_encoding = to_bool(key, v);
  else if (key == "ot.epsilon") m.ot.epsilon = to_double(key, v);
  else if (key == "ot.max_iters") m.ot.max_iters = to_size(key, v);
  else if (key == "ot.tol") m.ot.tol = to_double(key, v);
  else if (key == "loss.variant") m.loss = metrics::parse_loss_variant(v);
  else if (key == "synth.classes") c.synth.classes = to_size(key, v);
  else if (key == "synth.videos_per_class") c.synth.videos_per_class = to_size(key, v);
  else if (key == "synth.core_length") c.synth.core_length = to_size(key, v);
  else if (key == "synth.pad_min") c.synth.pad_min = to_size(key, v);
  else if (key == "synth.pad_max") c.synth.pad_max = to_size(key, v);
  else if (key == "synth.noise") c.synth.noise = to_double(key, v);
  else if (key == "synth.distractor_pool") c.synth.distractor_pool = to_size(key, v);
  else if (key == "synth.distractor_scale") c.synth.distractor_scale = to_double(key, v);
  else if (key == "synth.shared_template") c.synth.shared_template = to_bool(key, v);
  else if (key == "synth.seed") c.synth.seed = to_size(key, v);
  else if (key == "synth.eval_seed") c.eval_synth_seed = to_size(key, v);
  else if (key == "data.train") c.train_data = v;
  else if (key == "data.eval") c.eval_data = v;
  else if (key == "train.episodes") c.train_episodes = to_size(key, v);
  else if (key == "train.lr") c.lr = to_double(key, v);
  else if (key == "train.lr_final") c.lr_final = to_double(key, v);
  else if (key == "train.accumulate") c.accumulate = to_size(key, v);
  else if (key == "eval.episodes") c.eval_episodes = to_size(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline void parse_config_text(RunConfig& c, const std::string& text) {
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = config_detail::trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_option(c, key, line.substr(eq + 1));
  }
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  parse_config_text(base, ss.str());
  return base;
}

inline std::string RunConfig::canonical() const {
  using namespace config_detail;
  const auto& m = model;
  std::ostringstream os;
  os << "way = " << m.way << "\n"
     << "shot = " << shot << "\n"
     << "queries = " << queries << "\n"
     << "frames = " << m.frames << "\n"
     << "dim = " << m.dim_in << "\n"
     << "seed = " << seed << "\n"
     << "tsa.enabled = " << (m.tsa.enabled ? "on" : "off") << "\n"
     << "tsa.conv_channels = " << join(m.tsa.conv_channels) << "\n"
     << "tsa.kernel = " << m.tsa.kernel << "\n"
     << "tsa.task_hidden = " << m.tsa.task_hidden << "\n"
     << "tsa.init_identity = " << (m.tsa.init_identity ? "on" : "off") << "\n"
     << "mlt.cardinalities = " << join(m.mlt.levels.cardinalities) << "\n"
     << "mlt.tuple_reps = " << join(m.mlt.levels.tuple_reps) << "\n"
     << "mlt.dim_model = " << m.mlt.dim_model << "\n"
     << "mlt.dim_k = " << m.mlt.dim_k << "\n"
     << "mlt.dim_v = " << m.mlt.dim_v << "\n"
     << "mlt.pe = " << (m.mlt.positional_encoding ? "on" : "off") << "\n"
     << "ot.epsilon = " << fmt(m.ot.epsilon) << "\n"
     << "ot.max_iters = " << m.ot.max_iters << "\n"
     << "ot.tol = " << fmt(m.ot.tol) << "\n"
     << "loss.variant = " << metrics::to_string(m.loss) << "\n"
     << "synth.classes = " << synth.classes << "\n"
     << "synth.videos_per_class = " << synth.videos_per_class << "\n"
     << "synth.core_length = " << synth.core_length << "\n"
     << "synth.pad_min = " << synth.pad_min << "\n"
     << "synth.pad_max = " << synth.pad_max << "\n"
     << "synth.noise = " << fmt(synth.noise) << "\n"
     << "synth.distractor_pool = " << synth.distractor_pool << "\n"
     << "synth.distractor_scale = " << fmt(synth.distractor_scale) << "\n"
     << "synth.shared_template = " << (synth.shared_template ? "on" : "off") << "\n"
     << "synth.seed = " << synth.seed << "\n"
     << "synth.eval_seed = " << eval_synth_seed << "\n"
     << "train.episodes = " << train_episodes << "\n"
     << "train.lr = " << fmt(lr) << "\n"
     << "train.lr_final = " << fmt(lr_final) << "\n"
     << "train.accumulate = " << accumulate << "\n"
     << "eval.episodes = " << eval_episodes << "\n";
  if (!train_data.empty()) os << "data.train = " << train_data << "\n";
  if (!eval_data.empty()) os << "data.eval = " << eval_data << "\n";
  return os.str();
}

/// FNV-1a over the canonical text.
inline std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace tsamlt
