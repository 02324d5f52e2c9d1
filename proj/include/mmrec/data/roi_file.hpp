#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "mmrec/errors.hpp"

namespace mmrec {

// Row-major float32 matrix as stored in an MMRF file.
struct FeatureMatrix {
  std::uint32_t num_rows = 0;
  std::uint32_t feat_dim = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(values).subspan(r * feat_dim, feat_dim);
  }
  bool operator==(const FeatureMatrix&) const = default;
};

// MMRF layout, little-endian:
//   bytes 0..3   magic "MMRF"
//   bytes 4..7   u32 version (1)
//   bytes 8..11  u32 num_rows
//   bytes 12..15 u32 feat_dim
//   then num_rows * feat_dim float32 values, row-major.
namespace mmrf {

inline constexpr std::array<char, 4> kMagic{'M', 'M', 'R', 'F'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> encode(const FeatureMatrix& m) {
  if (static_cast<std::size_t>(m.num_rows) * m.feat_dim != m.values.size()) {
    throw ValidationError("feature matrix holds " + std::to_string(m.values.size()) + " values, header says " +
                          std::to_string(m.num_rows) + "x" + std::to_string(m.feat_dim));
  }
  std::vector<unsigned char> out;
  out.reserve(kHeaderBytes + 4 * m.values.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  put_u32(out, m.num_rows);
  put_u32(out, m.feat_dim);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (!std::isfinite(m.values[i])) {
      throw NonFiniteError("non-finite feature value at flat index " + std::to_string(i));
    }
    put_u32(out, std::bit_cast<std::uint32_t>(m.values[i]));
  }
  return out;
}

inline FeatureMatrix decode(std::span<const unsigned char> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic.data(), 4) != 0) throw FormatError("bad magic", 0);
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kVersion) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  FeatureMatrix m;
  m.num_rows = get_u32(bytes.data() + 8);
  m.feat_dim = get_u32(bytes.data() + 12);
  const std::size_t count = static_cast<std::size_t>(m.num_rows) * m.feat_dim;
  const std::size_t expected = kHeaderBytes + 4 * count;
  if (bytes.size() < expected) throw FormatError("truncated body", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after body", expected);
  m.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t offset = kHeaderBytes + 4 * i;
    m.values[i] = std::bit_cast<float>(get_u32(bytes.data() + offset));
    if (!std::isfinite(m.values[i])) throw FormatError("non-finite feature value", offset);
  }
  return m;
}

}  // namespace mmrf

inline void write_roi_features(const std::filesystem::path& path, const FeatureMatrix& rows) {
  const auto bytes = mmrf::encode(rows);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline FeatureMatrix read_roi_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return mmrf::decode(bytes);
}

}  // namespace mmrec
