// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "tove/error.hpp"
#include "tove/tensor.hpp"

namespace tove {

/// Seeded random source with a stable, documented output sequence.
///
/// Engine: std::mt19937_64 (fully specified by the standard, so identical
/// seeds give identical raw streams on every platform). All real-valued
/// transforms are implemented here rather than via std distributions,
/// whose algorithms are implementation-defined:
///   uniform01  = (x >> 11) * 2^-53           (one engine draw, in [0,1))
///   gaussian   = Box-Muller, cosine branch   (exactly two engine draws)
/// Child sources are derived with a SplitMix64 hash of (seed, index) so
/// parallel workers never share a stream.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection; n must be positive.
  std::uint64_t below(std::uint64_t n) {
    TOVE_CHECK(n > 0, "below() requires positive bound");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  double gaussian(double mean, double stddev) {
    if (stddev < 0.0) throw validation_error("gaussian stddev must be nonnegative");
    // u1 in (0,1] so log(u1) is finite; u2 in [0,1).
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double z = r * std::cos(2.0 * 3.14159265358979323846 * u2);
    return mean + stddev * z;
  }

  Tensor gaussian_tensor(std::vector<std::size_t> shape, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = gaussian(mean, stddev);
    return t;
  }

  /// Deterministic Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  /// Independent child stream; never hands out the parent's own sequence.
  RandomSource child(std::uint64_t index) const {
    return RandomSource(splitmix64(seed_ ^ splitmix64(index + 0x51ed2701)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// gaussian_sample: i.i.d. draws from a seeded source (Box-Muller).
inline Tensor gaussian_sample(RandomSource& rng, std::vector<std::size_t> shape, double mean,
                              double stddev) {
  return rng.gaussian_tensor(std::move(shape), mean, stddev);
}

}  // namespace tove
