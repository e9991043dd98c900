// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tove/error.hpp"

namespace tove {

/// Dense row-major tensor of 64-bit reals with an optional gradient slot.
/// Values are plain data; recorded computation lives in graph.hpp.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(count_of(shape), 0.0) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    TOVE_CHECK(data.size() == count_of(shape), "tensor data length does not match shape");
  }

  static std::size_t count_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
      TOVE_CHECK(d > 0, "tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const {
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  /// Accumulate g into the gradient slot, creating it zero-filled on first use.
  void accumulate_grad(const std::vector<double>& g) {
    TOVE_CHECK(g.size() == data.size(), "gradient length mismatch");
    if (!grad) grad.emplace(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
  }

  void clear_grad() { grad.reset(); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

inline Tensor full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

inline Tensor scalar(double v) { return Tensor({1}, {v}); }

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw validation_error(std::string("non-finite value produced in ") + where);
}

/// FNV-1a over the raw 64-bit patterns; used for cheap freeze/determinism checks.
inline std::uint64_t fnv1a_bits(std::uint64_t h, const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(double));
    std::memcpy(&bits, &p[i], sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

inline std::uint64_t tensor_hash(std::uint64_t h, const Tensor& t) {
  h = fnv1a_bits(h, t.data.data(), t.data.size());
  return h;
}

}  // namespace tove
