// SPDX-License-Identifier: Apache-2.0
//
// Oracles for the numeric substrate: GeLU, stable softmax, the MLP block,
// cross-entropy, and the seeded random source.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "tove/graph.hpp"
#include "tove/nn.hpp"
#include "tove/ops.hpp"
#include "tove/random.hpp"

using namespace tove;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

// Straight-line scalar evaluation of the pinned GeLU formula, written
// independently of the library kernel.
double gelu_oracle(double x) {
  const double u = std::sqrt(2.0 / 3.14159265358979323846) * (x + 0.044715 * std::pow(x, 3.0));
  return 0.5 * x * (1.0 + std::tanh(u));
}
}  // namespace

TEST(Gelu, FixedPointAndAsymptote) {
  EXPECT_DOUBLE_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(10.0), 10.0, 1e-6);
  EXPECT_NEAR(gelu_scalar(-10.0), 0.0, 1e-6);
}

TEST(Gelu, MatchesScalarOracle) {
  for (double x : {1.0, -1.3, 0.25, 3.7, -0.01}) EXPECT_DOUBLE_EQ(gelu_scalar(x), gelu_oracle(x));
  Tensor t({2, 2}, {1.0, -2.0, 0.5, 4.0});
  Tensor out = gelu(t);
  ASSERT_EQ(out.shape, t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_DOUBLE_EQ(out.data[i], gelu_oracle(t.data[i]));
}

TEST(Softmax, UniformAndShiftInvariance) {
  for (double c : {0.0, 5.0, -123.0}) {
    Tensor x({3}, {c, c, c});
    Tensor y = softmax_stable(x);
    for (double v : y.data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Softmax, MaskedEntryOracle) {
  Tensor x({3}, {0.0, std::log(2.0), -kInf});
  Tensor y = softmax_stable(x);
  EXPECT_NEAR(y.data[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(y.data[1], 2.0 / 3.0, 1e-12);
  EXPECT_EQ(y.data[2], 0.0);  // exactly zero
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  Tensor x({2}, {1000.0, 1000.0});
  Tensor y = softmax_stable(x);
  EXPECT_DOUBLE_EQ(y.data[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data[1], 0.5);
}

TEST(Softmax, AllMaskedThrows) {
  Tensor x({2}, {-kInf, -kInf});
  EXPECT_THROW(softmax_stable(x), Error);
}

TEST(Softmax, SumsToOneOnRandomInputs) {
  RandomSource rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    Tensor x({5});
    for (double& v : x.data) v = rng.gaussian(0.0, 3.0);
    Tensor y = softmax_stable(x);
    double s = 0.0;
    for (double v : y.data) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    // shift invariance
    const double c = rng.gaussian(0.0, 10.0);
    Tensor xs = x;
    for (double& v : xs.data) v += c;
    Tensor ys = softmax_stable(xs);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data[i], ys.data[i], 1e-12);
  }
}

TEST(Mlp, ZeroParamsGiveZeroOutput) {
  MlpParams p;
  p.w1 = zeros({3, 4});
  p.b1 = zeros({4});
  p.w2 = zeros({4, 2});
  p.b2 = zeros({2});
  Tensor x({5, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = static_cast<double>(i) - 6.0;
  Tensor y = mlp_forward(p, x);
  ASSERT_EQ(y.rows(), 5u);
  ASSERT_EQ(y.cols(), 2u);
  for (double v : y.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Mlp, IdentityWeightsComposeToGelu) {
  // identity first layer, identity second layer, inputs >= 3 pass through
  MlpParams p;
  p.w1 = zeros({3, 3});
  p.w2 = zeros({3, 3});
  for (int i = 0; i < 3; ++i) {
    p.w1.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    p.w2.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  }
  p.b1 = zeros({3});
  p.b2 = zeros({3});
  // gelu(x) ~ x only from x ~ 4 up at the 1e-3 level (gelu(3) = 2.9964)
  Tensor x({1, 3}, {4.0, 5.0, 9.0});
  Tensor y = mlp_forward(p, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.data[i], x.data[i], 1e-3);
}

TEST(Mlp, RandomCaseMatchesStraightLineOracle) {
  RandomSource rng(13);
  MlpParams p = MlpParams::make(rng, 3, 3, 2);
  Tensor x({2, 3});
  for (double& v : x.data) v = rng.gaussian(0.0, 1.0);
  Tensor y = mlp_forward(p, x);
  // independent straight-line evaluation
  for (std::size_t r = 0; r < 2; ++r) {
    double hidden[3];
    for (int jj = 0; jj < 3; ++jj) {
      double s = p.b1.data[static_cast<std::size_t>(jj)];
      for (int ii = 0; ii < 3; ++ii)
        s += x.data[r * 3 + static_cast<std::size_t>(ii)] * p.w1.data[static_cast<std::size_t>(ii * 3 + jj)];
      hidden[jj] = gelu_oracle(s);
    }
    for (int oo = 0; oo < 2; ++oo) {
      double s = p.b2.data[static_cast<std::size_t>(oo)];
      for (int jj = 0; jj < 3; ++jj) s += hidden[jj] * p.w2.data[static_cast<std::size_t>(jj * 2 + oo)];
      EXPECT_NEAR(y.data[r * 2 + static_cast<std::size_t>(oo)], s, 1e-12);
    }
  }
}

TEST(Mlp, ShapeMismatchThrows) {
  RandomSource rng(1);
  MlpParams p = MlpParams::make(rng, 3, 4, 2);
  Graph g;
  Tensor x({2, 5});
  EXPECT_THROW(p.apply(g, g.input(x), false), Error);
}

TEST(CrossEntropy, UniformLogits) {
  const std::size_t V = 64;
  Graph g;
  Tensor logits({3, V});
  std::vector<int> targets = {5, 10, 63};
  Var ce = g.cross_entropy(g.input(logits), targets, 0);
  EXPECT_NEAR(g.value(ce).data[0], std::log(64.0), 1e-12);
}

TEST(CrossEntropy, ConfidentLogitsNearZero) {
  Graph g;
  Tensor logits({2, 4});
  logits.at(0, 1) = 1e4;
  logits.at(1, 3) = 1e4;
  Var ce = g.cross_entropy(g.input(logits), {1, 3}, -1);
  EXPECT_NEAR(g.value(ce).data[0], 0.0, 1e-6);
}

TEST(CrossEntropy, TwoPositionOracleWithIgnore) {
  // scalar oracle: mean over counted rows of log-sum-exp minus target logit
  Graph g;
  Tensor logits({3, 3}, {0.3, -1.0, 0.7, 2.0, 0.0, -0.5, 9.9, 9.9, 9.9});
  std::vector<int> targets = {2, 0, -1};  // last row ignored
  Var ce = g.cross_entropy(g.input(logits), targets, -1);
  auto row_loss = [&](std::size_t r, int t) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(logits.at(r, c));
    return std::log(s) - logits.at(r, static_cast<std::size_t>(t));
  };
  const double expect = 0.5 * (row_loss(0, 2) + row_loss(1, 0));
  EXPECT_NEAR(g.value(ce).data[0], expect, 1e-12);
}

TEST(CrossEntropy, Errors) {
  Graph g;
  Tensor logits({2, 3});
  EXPECT_THROW(g.cross_entropy(g.input(logits), {0, 3}, -1), Error);   // out of range
  EXPECT_THROW(g.cross_entropy(g.input(logits), {-1, -1}, -1), Error); // all ignored
}

TEST(Random, DeterministicAcrossInstances) {
  RandomSource a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  RandomSource c(42), d(42);
  Tensor t1 = gaussian_sample(c, {4}, 0.0, 1.0);
  Tensor t2 = gaussian_sample(d, {4}, 0.0, 1.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t1.data[i], t2.data[i]);
}

TEST(Random, ChildStreamsDiffer) {
  RandomSource root(7);
  RandomSource a = root.child(0), b = root.child(1);
  bool any_diff = false;
  for (int i = 0; i < 8; ++i) any_diff |= (a.next_u64() != b.next_u64());
  EXPECT_TRUE(any_diff);
}

TEST(Random, ZeroStddevIsMean) {
  RandomSource rng(3);
  Tensor t = gaussian_sample(rng, {16}, 2.5, 0.0);
  for (double v : t.data) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Random, NegativeStddevThrows) {
  RandomSource rng(3);
  EXPECT_THROW(gaussian_sample(rng, {1}, 0.0, -1.0), Error);
}

TEST(Random, SampleStddevMatchesNoiseScale) {
  // 1e5 draws at the routing-noise scale for K = 4
  RandomSource rng(11);
  const double sd = 0.0625;
  const std::size_t n = 100000;
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = rng.gaussian(0.0, sd);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / static_cast<double>(n);
  const double stddev = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  EXPECT_NEAR(stddev, sd, 0.02 * sd);
}

TEST(Tensor, InvariantChecks) {
  EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), Error);  // length mismatch
  EXPECT_THROW(Tensor({0, 3}), Error);              // zero dimension
  Tensor t({2, 2}, {1, 2, 3, 4});
  t.accumulate_grad({1, 1, 1, 1});
  t.accumulate_grad({1, 1, 1, 1});
  for (double g : *t.grad) EXPECT_DOUBLE_EQ(g, 2.0);
}
