// SPDX-License-Identifier: Apache-2.0
//
// Routing scores, masked/noisy ensemble weights, fusion strategies,
// contribution statistics, and the routing invariants.

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "tove/routing.hpp"

using namespace tove;

TEST(Route, ZeroParamsGiveZeroScores) {
  RandomSource rng(1);
  GatingParams gp = GatingParams::make(rng, 8, 3, false);
  std::fill(gp.lin.w.data.begin(), gp.lin.w.data.end(), 0.0);
  Graph g;
  Tensor tokens = rng.gaussian_tensor({5, 8}, 0.0, 1.0);
  const Tensor& r = g.value(gp.route(g, g.input(tokens), false));
  for (double v : r.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Route, TokenwiseFunction) {
  RandomSource rng(2);
  GatingParams gp = GatingParams::make(rng, 8, 3, false);
  Tensor tokens({2, 8});
  for (std::size_t i = 0; i < 8; ++i) tokens.at(0, i) = tokens.at(1, i) = std::sin(static_cast<double>(i));
  Graph g;
  const Tensor& r = g.value(gp.route(g, g.input(tokens), false));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(r.at(0, c), r.at(1, c));
}

TEST(Route, MatchesScalarOracle) {
  RandomSource rng(3);
  GatingParams gp = GatingParams::make(rng, 4, 3, false);
  Tensor tokens = rng.gaussian_tensor({2, 4}, 0.0, 1.0);
  Graph g;
  const Tensor& r = g.value(gp.route(g, g.input(tokens), false));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = gp.lin.b.data[k];
      for (std::size_t d = 0; d < 4; ++d) s += tokens.at(i, d) * gp.lin.w.at(d, k);
      EXPECT_NEAR(r.at(i, k), s, 1e-12);
    }
}

TEST(Route, MlpVariantTrains) {
  RandomSource rng(4);
  GatingParams gp = GatingParams::make(rng, 4, 3, true);
  Tensor tokens = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  auto res = testutil::check_gradients(
      [&](Graph& g) {
        Var r = gp.route(g, g.input(tokens), true);
        return g.sum(g.mul(r, r));
      },
      {{"w1", &gp.mlp.w1}, {"b1", &gp.mlp.b1}, {"w2", &gp.mlp.w2}, {"b2", &gp.mlp.b2}});
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Ensemble, UniformScoresUniformWeights) {
  Tensor r = full({4, 3}, 1.7);
  Tensor w = ensemble_weights_value(r, all_experts(3));
  for (double v : w.data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Ensemble, SingleRetainedExpertTakesAll) {
  RandomSource rng(5);
  Tensor r = rng.gaussian_tensor({6, 3}, 0.0, 2.0);
  Tensor w = ensemble_weights_value(r, {1});
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(w.at(i, 0), 0.0);
    EXPECT_DOUBLE_EQ(w.at(i, 1), 1.0);
    EXPECT_DOUBLE_EQ(w.at(i, 2), 0.0);
  }
}

TEST(Ensemble, MaskedSoftmaxOracle) {
  Tensor r({1, 3}, {0.0, std::log(3.0), 0.0});
  Tensor w = ensemble_weights_value(r, {0, 1});
  EXPECT_NEAR(w.at(0, 0), 0.25, 1e-12);
  EXPECT_NEAR(w.at(0, 1), 0.75, 1e-12);
  EXPECT_DOUBLE_EQ(w.at(0, 2), 0.0);
}

TEST(Ensemble, EmptyRetainedSetThrows) {
  Graph g;
  Tensor r({2, 3});
  EXPECT_THROW(ensemble_weights(g, g.input(r), nullptr, {}), Error);
}

TEST(Ensemble, RowStochasticAndMaskedZeroRandomized) {
  RandomSource rng(6);
  RandomSource noise(7);
  for (int rep = 0; rep < 10000; ++rep) {
    const std::size_t k = 2 + rng.below(4);
    const std::size_t n = 1 + rng.below(4);
    Tensor r = rng.gaussian_tensor({n, k}, 0.0, 3.0);
    std::vector<int> retained;
    for (std::size_t i = 0; i < k; ++i)
      if (rng.below(2) == 1) retained.push_back(static_cast<int>(i));
    if (retained.empty()) retained.push_back(static_cast<int>(rng.below(k)));
    const bool with_noise = rng.below(2) == 1;
    Graph g;
    Tensor w = g.value(ensemble_weights(g, g.input(r), with_noise ? &noise : nullptr, retained));
    std::vector<bool> keep(k, false);
    for (int id : retained) keep[static_cast<std::size_t>(id)] = true;
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        sum += w.at(i, c);
        if (!keep[c]) EXPECT_DOUBLE_EQ(w.at(i, c), 0.0);
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Ensemble, ShiftInvariance) {
  RandomSource rng(8);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor r = rng.gaussian_tensor({3, 4}, 0.0, 2.0);
    Tensor shifted = r;
    const double c = rng.gaussian(0.0, 5.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) shifted.at(i, k) += c;
    Tensor w1 = ensemble_weights_value(r, all_experts(4));
    Tensor w2 = ensemble_weights_value(shifted, all_experts(4));
    for (std::size_t i = 0; i < w1.size(); ++i) EXPECT_NEAR(w1.data[i], w2.data[i], 1e-12);
  }
}

TEST(Ensemble, NoiseDeterministicPerSeed) {
  RandomSource rng(9);
  Tensor r = rng.gaussian_tensor({4, 4}, 0.0, 1.0);
  RandomSource n1(77), n2(77);
  Graph g1, g2;
  Tensor w1 = g1.value(ensemble_weights(g1, g1.input(r), &n1, all_experts(4)));
  Tensor w2 = g2.value(ensemble_weights(g2, g2.input(r), &n2, all_experts(4)));
  EXPECT_EQ(w1.data, w2.data);
}

TEST(EnsembleTokens, OneHotSelectsExpert) {
  RandomSource rng(10);
  Tensor w({3, 2}, {1, 0, 1, 0, 1, 0});
  Tensor p0 = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Tensor p1 = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Graph g;
  Tensor out = g.value(ensemble_expert_tokens(g, g.input(w), {g.input(p0), g.input(p1)}));
  EXPECT_EQ(out.data, p0.data);
}

TEST(EnsembleTokens, ConvexityOnIdenticalParts) {
  RandomSource rng(11);
  Tensor p = rng.gaussian_tensor({4, 3}, 0.0, 1.0);
  Tensor w({4, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    double a = rng.uniform01(), b = rng.uniform01() * (1 - a);
    w.at(i, 0) = a; w.at(i, 1) = b; w.at(i, 2) = 1 - a - b;
  }
  Graph g;
  Tensor out = g.value(ensemble_expert_tokens(g, g.input(w), {g.input(p), g.input(p), g.input(p)}));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data[i], p.data[i], 1e-12);
}

TEST(EnsembleTokens, HandOracle) {
  Tensor w({1, 2}, {0.25, 0.75});
  Tensor p0({1, 2}, {1.0, 0.0});
  Tensor p1({1, 2}, {0.0, 1.0});
  Graph g;
  Tensor out = g.value(ensemble_expert_tokens(g, g.input(w), {g.input(p0), g.input(p1)}));
  EXPECT_NEAR(out.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(out.at(0, 1), 0.75, 1e-15);
}

TEST(Fusion, LambdaZeroIsIdentity) {
  RandomSource rng(12);
  FusionParams f = FusionParams::make(rng, 4, 0.0);
  for (double& v : f.mlp.w2.data) v = rng.gaussian(0.0, 1.0);  // nonzero output layer
  Tensor tv = rng.gaussian_tensor({5, 4}, 0.0, 1.0);
  Tensor te = rng.gaussian_tensor({5, 4}, 0.0, 1.0);
  Graph g;
  Tensor out = g.value(fuse_residual(g, f, g.input(tv), g.input(te), false));
  EXPECT_EQ(out.data, tv.data);  // bit-identical
}

TEST(Fusion, ZeroSecondLayerIsIdentityForAnyLambda) {
  RandomSource rng(13);
  FusionParams f = FusionParams::make(rng, 4, 0.7);  // w2/b2 zero-initialized
  Tensor tv = rng.gaussian_tensor({5, 4}, 0.0, 1.0);
  Tensor te = rng.gaussian_tensor({5, 4}, 0.0, 1.0);
  Graph g;
  Tensor out = g.value(fuse_residual(g, f, g.input(tv), g.input(te), false));
  EXPECT_EQ(out.data, tv.data);
}

TEST(Fusion, ResidualLinearCombination) {
  RandomSource rng(14);
  FusionParams f = FusionParams::make(rng, 4, 0.1);
  for (double& v : f.mlp.w2.data) v = rng.gaussian(0.0, 1.0);
  Tensor tv = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Tensor te = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Graph g;
  Var tev = g.input(te);
  Tensor u = g.value(f.mlp.apply(g, tev, false));
  Tensor out = g.value(fuse_residual(g, f, g.input(tv), tev, false));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data[i], tv.data[i] + 0.1 * u.data[i], 1e-12);
}

TEST(Fusion, LambdaContinuityBound) {
  // ||fused - t_vis|| == lambda * ||M(t_exp)|| row-wise, exactly
  RandomSource rng(15);
  for (double lambda : {0.05, 0.3, 1.0}) {
    FusionParams f = FusionParams::make(rng, 4, lambda);
    for (double& v : f.mlp.w2.data) v = rng.gaussian(0.0, 1.0);
    Tensor tv = rng.gaussian_tensor({4, 4}, 0.0, 1.0);
    Tensor te = rng.gaussian_tensor({4, 4}, 0.0, 1.0);
    Graph g;
    Var tev = g.input(te);
    Tensor m = g.value(f.mlp.apply(g, tev, false));
    Tensor out = g.value(fuse_residual(g, f, g.input(tv), tev, false));
    for (std::size_t i = 0; i < 4; ++i) {
      double gap = 0.0, mn = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        gap += (out.at(i, c) - tv.at(i, c)) * (out.at(i, c) - tv.at(i, c));
        mn += m.at(i, c) * m.at(i, c);
      }
      EXPECT_NEAR(std::sqrt(gap), lambda * std::sqrt(mn), 1e-9);
    }
  }
}

TEST(Fusion, DirectAndConcat) {
  RandomSource rng(16);
  Tensor tv = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Tensor zero({3, 4});
  Graph g;
  Tensor direct = g.value(fuse_direct(g, g.input(tv), g.input(zero)));
  EXPECT_EQ(direct.data, tv.data);
  Tensor te = rng.gaussian_tensor({3, 4}, 0.0, 1.0);
  Tensor cat = g.value(fuse_concat(g, g.input(tv), g.input(te)));
  ASSERT_EQ(cat.rows(), 6u);
  for (std::size_t i = 0; i < tv.size(); ++i) {
    EXPECT_DOUBLE_EQ(cat.data[i], tv.data[i]);
    EXPECT_DOUBLE_EQ(cat.data[tv.size() + i], te.data[i]);
  }
}

TEST(Fusion, DirectEqualsResidualWithUnitLambdaIdentityMlp) {
  // residual with lambda=1 and M = identity configuration == direct addition
  RandomSource rng(17);
  const std::size_t d = 3;
  FusionParams f = FusionParams::make(rng, d, 1.0);
  // big first layer shift makes gelu exactly linear? no - use identity via
  // large-x asymptote is inexact; instead wire w1 = I * s, w2 = I / s with a
  // huge positive bias so gelu operates in its identity regime, then remove
  // the bias through b2. Cleaner: test the algebraic route on positive data.
  const double shift = 50.0;
  f.mlp.w1 = zeros({d, d});
  f.mlp.w2 = zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    f.mlp.w1.at(i, i) = 1.0;
    f.mlp.w2.at(i, i) = 1.0;
  }
  f.mlp.b1 = full({d}, shift);
  f.mlp.b2 = full({d}, -shift);
  RandomSource data_rng(18);
  Tensor tv = data_rng.gaussian_tensor({4, d}, 0.0, 1.0);
  Tensor te = data_rng.gaussian_tensor({4, d}, 0.0, 1.0);
  Graph g;
  Tensor res = g.value(fuse_residual(g, f, g.input(tv), g.input(te), false));
  Tensor dir = g.value(fuse_direct(g, g.input(tv), g.input(te)));
  for (std::size_t i = 0; i < res.size(); ++i) EXPECT_NEAR(res.data[i], dir.data[i], 1e-9);
}

TEST(Contribution, UniformBatchRanksByTieBreak) {
  ContributionStats stats = ContributionStats::make(4);
  Tensor w = full({8, 4}, 0.25);
  stats.update(w);
  for (double m : stats.mean) EXPECT_NEAR(m, 0.25, 1e-15);
  std::vector<int> rank = rank_experts(stats);
  EXPECT_EQ(rank, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Contribution, TwoBatchMean) {
  ContributionStats stats = ContributionStats::make(2);
  stats.update(Tensor({1, 2}, {1.0, 0.0}));
  stats.update(Tensor({1, 2}, {0.0, 1.0}));
  EXPECT_NEAR(stats.mean[0], 0.5, 1e-15);
  EXPECT_NEAR(stats.mean[1], 0.5, 1e-15);
}

TEST(Contribution, StreamingMatchesConcatenatedOracle) {
  RandomSource rng(19);
  ContributionStats stats = ContributionStats::make(3);
  std::vector<double> sums(3, 0.0);
  double rows = 0.0;
  for (int b = 0; b < 1000; ++b) {
    const std::size_t n = 1 + rng.below(5);
    Tensor r = rng.gaussian_tensor({n, 3}, 0.0, 2.0);
    Tensor w = ensemble_weights_value(r, all_experts(3));
    stats.update(w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 3; ++c) sums[c] += w.at(i, c);
    rows += static_cast<double>(n);
  }
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(stats.mean[c], sums[c] / rows, 1e-9);
}

TEST(Contribution, RankDescendingWithTies) {
  ContributionStats stats = ContributionStats::make(4);
  stats.mean = {0.2, 0.4, 0.2, 0.2};
  stats.count = 1;
  EXPECT_EQ(rank_experts(stats), (std::vector<int>{1, 0, 2, 3}));
}

TEST(Entropy, UniformIsLogK) {
  Tensor w = full({5, 4}, 0.25);
  EXPECT_NEAR(routing_entropy(w), std::log(4.0), 1e-12);
  Tensor onehot({2, 4});
  onehot.at(0, 1) = 1.0;
  onehot.at(1, 2) = 1.0;
  EXPECT_NEAR(routing_entropy(onehot), 0.0, 1e-12);
}
