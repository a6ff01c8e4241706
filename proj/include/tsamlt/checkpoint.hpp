#pragma once

// Binary checkpoint: every parameter-store entry (trainable weights and
// batch-norm running statistics) plus the run configuration and the
// training sampler state. All integers little-endian, values f64.
//
//   "TSCK" u32 version
//   u64 config hash, u32 len + config text, u32 len + rng state
//   u32 entry count, then per entry:
//     u32 len + name, u8 trainable, u32 rank, u32 dims[rank], f64 values

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tsamlt/config.hpp"
#include "tsamlt/errors.hpp"
#include "tsamlt/model.hpp"

namespace tsamlt::checkpoint {

inline constexpr std::array<char, 4> kMagic{'T', 'S', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

struct Entry {
  std::string name;
  bool trainable = true;
  tensor::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::string rng_state;
  std::vector<Entry> entries;

  RunConfig config() const {
    RunConfig c;
    parse_config_text(c, config_text);
    return c;
  }
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <class T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    std::array<unsigned char, sizeof(U)> b{};
    is_.read(reinterpret_cast<char*>(b.data()), sizeof(U));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(U))) truncated(what);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(b[i]) << (8 * i);
    return std::bit_cast<T>(u);
  }

  std::string string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (static_cast<std::uint32_t>(is_.gcount()) != n) truncated(what);
    return s;
  }

 private:
  [[noreturn]] static void truncated(const char* what) {
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  }
  std::istream& is_;
};

}  // namespace detail

inline Checkpoint capture(const Model& model, const RunConfig& cfg, const std::string& rng_state) {
  Checkpoint ck;
  ck.config_hash = cfg.hash();
  ck.config_text = cfg.canonical();
  ck.rng_state = rng_state;
  for (const auto& e : model.params().entries()) {
    ck.entries.push_back({e.name, e.trainable, e.tensor.shape(),
                          std::vector<double>(e.tensor.data().begin(), e.tensor.data().end())});
  }
  return ck;
}

inline void write(std::ostream& os, const Checkpoint& ck) {
  using detail::put;
  os.write(kMagic.data(), 4);
  put(os, kVersion);
  put(os, ck.config_hash);
  detail::put_string(os, ck.config_text);
  detail::put_string(os, ck.rng_state);
  put(os, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    detail::put_string(os, e.name);
    put(os, static_cast<std::uint8_t>(e.trainable ? 1 : 0));
    put(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put(os, static_cast<std::uint32_t>(d));
    for (double v : e.values) put(os, v);
  }
}

inline Checkpoint read(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (is.gcount() != 4 || magic != kMagic) throw FormatError("checkpoint: bad magic");
  detail::Reader r(is);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_hash = r.get<std::uint64_t>("config hash");
  ck.config_text = r.string("config text");
  ck.rng_state = r.string("rng state");
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.string("entry name");
    e.trainable = r.get<std::uint8_t>("trainable flag") != 0;
    const auto rank = r.get<std::uint32_t>("rank");
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint32_t>("dims"));
    const std::size_t n = tensor::numel(e.shape);
    e.values.resize(n);
    for (auto& v : e.values) v = r.get<double>("values");
    ck.entries.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  if (ck.config().hash() != ck.config_hash) throw FormatError("checkpoint: config hash mismatch");
  return ck;
}

inline void save(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot write " + path);
  write(os, ck);
  if (!os) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  return read(is);
}

/// Copies checkpoint values into `model`; names, order and shapes must match.
inline void apply(const Checkpoint& ck, Model& model) {
  const auto& entries = model.params().entries();
  if (entries.size() != ck.entries.size()) {
    throw ShapeError("checkpoint: holds " + std::to_string(ck.entries.size()) +
                     " entries, model has " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = ck.entries[i];
    auto dst = entries[i].tensor;
    if (src.name != entries[i].name || src.shape != dst.shape()) {
      throw ShapeError("checkpoint: entry " + src.name + " does not match model entry " +
                       entries[i].name);
    }
    auto v = dst.mutable_data();
    std::copy(src.values.begin(), src.values.end(), v.begin());
  }
}

/// Builds the model described by the checkpoint's configuration and loads
/// its values.
inline std::unique_ptr<Model> restore(const Checkpoint& ck) {
  const RunConfig cfg = ck.config();
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  apply(ck, *model);
  return model;
}

}  // namespace tsamlt::checkpoint
