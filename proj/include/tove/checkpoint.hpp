// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tove/error.hpp"
#include "tove/tensor.hpp"

namespace tove {

/// Checkpoint container: magic "TOVE", a u32 format version, the run config
/// and hub manifest embedded as text, then a manifest of named tensors
/// (name, rank, dims, little-endian 64-bit data).
struct CheckpointData {
  std::uint32_t version = 1;
  std::string config_text;
  std::string hub_manifest;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw io_error("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint64_t max_len = 1ull << 30) {
  const std::uint64_t n = read_pod<std::uint64_t>(is);
  if (n > max_len) throw io_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw io_error("checkpoint: truncated string");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const CheckpointData& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open checkpoint for writing: " + path);
  os.write("TOVE", 4);
  detail::write_pod<std::uint32_t>(os, ck.version);
  detail::write_string(os, ck.config_text);
  detail::write_string(os, ck.hub_manifest);
  detail::write_pod<std::uint64_t>(os, ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    detail::write_string(os, name);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw io_error("checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TOVE", 4) != 0) throw io_error("corrupt checkpoint: bad magic");
  CheckpointData ck;
  ck.version = detail::read_pod<std::uint32_t>(is);
  if (ck.version != 1) throw io_error("unsupported checkpoint version");
  ck.config_text = detail::read_string(is);
  ck.hub_manifest = detail::read_string(is);
  const std::uint64_t count = detail::read_pod<std::uint64_t>(is);
  if (count > 1u << 20) throw io_error("corrupt checkpoint: tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(is, 1u << 16);
    const std::uint32_t rank = detail::read_pod<std::uint32_t>(is);
    if (rank > 8) throw io_error("corrupt checkpoint: tensor rank");
    std::vector<std::size_t> shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = detail::read_pod<std::uint64_t>(is);
      if (dim == 0 || dim > 1u << 24) throw io_error("corrupt checkpoint: tensor dim");
      shape.push_back(static_cast<std::size_t>(dim));
    }
    if (rank == 0) shape = {1};
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw io_error("corrupt checkpoint: truncated tensor data");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open file for hashing: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    const std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (is.eof()) break;
  }
  return h;
}

}  // namespace tove
