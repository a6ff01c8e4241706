#pragma once

// TSAE embedding container.
//
// Layout (all integers u32 little-endian):
//   "TSAE" | version=1 | video count | M | D_in
//   per video: class_id | id length | id bytes (UTF-8) | M·D_in f32 LE values
//
// A sidecar JSON manifest `<path>.json` maps class ids to names:
//   {"classes": {"3": "archery", ...}}

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsamlt/episodes.hpp"
#include "tsamlt/errors.hpp"

namespace tsamlt::tsae {

inline constexpr std::array<char, 4> kMagic{'T', 'S', 'A', 'E'};
inline constexpr std::uint32_t kVersion = 1;

inline std::string manifest_path(const std::string& path) { return path + ".json"; }

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint32_t u32(const char* what) {
    std::array<unsigned char, 4> b{};
    is_.read(reinterpret_cast<char*>(b.data()), 4);
    if (is_.gcount() != 4) throw FormatError(std::string("tsae: truncated while reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(std::string("tsae: truncated while reading ") + what);
    }
    return s;
  }

 private:
  std::istream& is_;
};

}  // namespace detail

/// Writes `data` (values narrowed to f32) and its class-name manifest.
inline void write_tsae(const std::string& path, const episodes::Dataset& data) {
  data.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("tsae: cannot open " + path + " for writing");
  os.write(kMagic.data(), 4);
  detail::put_u32(os, kVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(data.videos.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(data.frames));
  detail::put_u32(os, static_cast<std::uint32_t>(data.dim));
  for (const auto& v : data.videos) {
    detail::put_u32(os, static_cast<std::uint32_t>(v.class_id));
    detail::put_u32(os, static_cast<std::uint32_t>(v.video_id.size()));
    os.write(v.video_id.data(), static_cast<std::streamsize>(v.video_id.size()));
    for (double x : v.values) detail::put_f32(os, static_cast<float>(x));
  }
  if (!os) throw FormatError("tsae: write failed for " + path);

  nlohmann::json manifest;
  manifest["classes"] = nlohmann::json::object();
  for (std::size_t c = 0; c < data.class_names.size(); ++c) {
    manifest["classes"][std::to_string(c)] = data.class_names[c];
  }
  std::ofstream ms(manifest_path(path));
  if (!ms) throw FormatError("tsae: cannot write manifest for " + path);
  ms << manifest.dump(2) << '\n';
}

struct LoadOptions {
  std::optional<std::size_t> expected_frames;
  std::optional<std::size_t> expected_dim;
};

/// Reads a TSAE file. Class ids are remapped to dense ids in ascending id
/// order; names come from the sidecar manifest when present.
inline episodes::Dataset load_embeddings(const std::string& path, const LoadOptions& opts = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("tsae: cannot open " + path);
  detail::Reader r(is);
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kMagic.begin(), kMagic.end())) {
    throw FormatError("tsae: bad magic in " + path);
  }
  const auto version = r.u32("version");
  if (version != kVersion) {
    throw FormatError("tsae: unsupported version " + std::to_string(version));
  }
  const std::size_t count = r.u32("video count");
  const std::size_t frames = r.u32("frame count");
  const std::size_t dim = r.u32("feature dim");
  if (frames < 2 || dim < 1) throw FormatError("tsae: invalid extents in header");
  if (opts.expected_frames && *opts.expected_frames != frames) {
    throw FormatError("tsae: file has M=" + std::to_string(frames) + ", expected " +
                      std::to_string(*opts.expected_frames));
  }
  if (opts.expected_dim && *opts.expected_dim != dim) {
    throw FormatError("tsae: file has D_in=" + std::to_string(dim) + ", expected " +
                      std::to_string(*opts.expected_dim));
  }

  episodes::Dataset ds;
  ds.frames = frames;
  ds.dim = dim;
  std::vector<std::uint32_t> raw_ids;
  for (std::size_t i = 0; i < count; ++i) {
    episodes::EmbeddingSequence seq;
    raw_ids.push_back(r.u32("class id"));
    const std::size_t id_len = r.u32("id length");
    if (id_len > (1u << 20)) throw FormatError("tsae: implausible id length");
    seq.video_id = r.bytes(id_len, "video id");
    seq.frames = frames;
    seq.dim = dim;
    const std::string block = r.bytes(frames * dim * 4, "tensor block");
    seq.values.resize(frames * dim);
    for (std::size_t k = 0; k < seq.values.size(); ++k) {
      const auto* p = reinterpret_cast<const unsigned char*>(block.data() + 4 * k);
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                 (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) throw FormatError("tsae: non-finite value in " + seq.video_id);
      seq.values[k] = f;
    }
    ds.videos.push_back(std::move(seq));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("tsae: trailing bytes after last video");
  }

  std::map<std::uint32_t, std::size_t> dense;
  for (auto id : raw_ids) dense.emplace(id, 0);
  std::size_t next = 0;
  for (auto& [id, d] : dense) d = next++;
  for (std::size_t i = 0; i < count; ++i) ds.videos[i].class_id = dense.at(raw_ids[i]);

  std::map<std::string, std::string> names;
  if (std::filesystem::exists(manifest_path(path))) {
    std::ifstream ms(manifest_path(path));
    try {
      const auto manifest = nlohmann::json::parse(ms);
      for (const auto& [k, v] : manifest.at("classes").items()) names[k] = v.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("tsae: malformed manifest: ") + e.what());
    }
  }
  ds.class_names.resize(dense.size());
  for (const auto& [id, d] : dense) {
    const auto it = names.find(std::to_string(id));
    ds.class_names[d] = it != names.end() ? it->second : "class_" + std::to_string(id);
  }
  return ds;
}

}  // namespace tsamlt::tsae
