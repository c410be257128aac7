// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_CHECKPOINT_HPP
#define FEDRAND_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fedrand/errors.hpp"
#include "fedrand/matrix.hpp"

namespace fedrand {

// Single-file binary container for named matrices. Doubles are written as
// their raw 8-byte little-endian representation, so a load of a save is
// bit-exact. Entries are ordered by name.
//
// Layout: magic "FRCKPT1\n", u32 entry count, then per entry
//   u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64.
using NamedMatrices = std::map<std::string, Matrix>;

namespace detail {

constexpr char kCheckpointMagic[8] = {'F', 'R', 'C', 'K', 'P', 'T', '1', '\n'};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char buf[4];
  is.read(reinterpret_cast<char*>(buf), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const NamedMatrices& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, m] : entries) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.cols()));
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(m.data().data()),
             static_cast<std::streamsize>(m.data().size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

inline NamedMatrices load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[sizeof(detail::kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const std::uint32_t count = detail::read_u32(is);
  NamedMatrices out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(is);
    if (name_len > 4096) throw IoError("checkpoint: implausible entry name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rows = detail::read_u32(is);
    const std::uint32_t cols = detail::read_u32(is);
    if (rows == 0 || cols == 0 || static_cast<std::uint64_t>(rows) * cols > (1u << 26)) {
      throw IoError("checkpoint: implausible matrix shape in " + path.string());
    }
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated matrix data in " + path.string());
    out.emplace(std::move(name), Matrix(rows, cols, std::move(data)));
  }
  return out;
}

// FNV-1a over the raw bytes of a matrix set, in name order. Used for the
// interception-log integrity fields and the report tamper check.
inline std::uint64_t checksum(const NamedMatrices& entries) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, m] : entries) {
    feed(name.data(), name.size());
    const std::uint64_t dims[2] = {m.rows(), m.cols()};
    feed(dims, sizeof(dims));
    feed(m.data().data(), m.data().size() * sizeof(double));
  }
  return h;
}

inline std::uint64_t checksum_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Zero-padded so lexicographic entry order equals layer order.
inline std::string layer_name(std::size_t l) {
  std::string n = std::to_string(l);
  return "layer_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

}  // namespace fedrand

#endif  // FEDRAND_CHECKPOINT_HPP
