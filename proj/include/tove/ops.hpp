// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "tove/error.hpp"
#include "tove/tensor.hpp"

namespace tove {

// ----- scalar kernels --------------------------------------------------------

/// GeLU, tanh approximation (pinned so oracles reproduce across builds):
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
inline double gelu_scalar(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double normal_cdf(double z) {
  if (std::isinf(z)) return z > 0 ? 1.0 : 0.0;
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

inline double normal_pdf(double z) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

// ----- softmax ----------------------------------------------------------------

/// Max-subtracted softmax. Entries of -inf map to exactly 0; throws when every
/// entry is -inf (nothing left to normalize over).
inline void softmax_stable_inplace(std::vector<double>& x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  if (mx == -std::numeric_limits<double>::infinity())
    throw validation_error("softmax: all entries masked");
  double sum = 0.0;
  for (double& v : x) {
    v = (v == -std::numeric_limits<double>::infinity()) ? 0.0 : std::exp(v - mx);
    sum += v;
  }
  for (double& v : x) v /= sum;
}

inline Tensor softmax_stable(const Tensor& x) {
  std::vector<double> v = x.data;
  softmax_stable_inplace(v);
  return Tensor(x.shape, std::move(v));
}

/// Elementwise GeLU on a whole tensor, shape preserved.
inline Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data) v = gelu_scalar(v);
  return out;
}

// ----- dense matrix kernels (row-major, accumulate into caller-zeroed C) ------

/// C[n x m] += A[n x k] . B[k x m]
inline void mat_mul_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                       std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      double* crow = c + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
}

/// C[n x k] += A[n x m] . B[k x m]^T
inline void mat_mul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
                       std::size_t k) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double* arow = a + i * m;
      const double* brow = b + j * m;
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) s += arow[p] * brow[p];
      c[i * k + j] += s;
    }
}

/// C[k x m] += A[n x k]^T . B[n x m]
inline void mat_mul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                       std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * m;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
}

}  // namespace tove
