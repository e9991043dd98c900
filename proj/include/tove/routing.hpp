// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "tove/graph.hpp"
#include "tove/nn.hpp"
#include "tove/random.hpp"

namespace tove {

/// Token-aware gating network: a single linear layer by default, optionally a
/// two-layer perceptron.
struct GatingParams {
  bool use_mlp = false;
  LinearParams lin;  // d_vis -> K
  MlpParams mlp;     // d_vis -> d_vis -> K

  static GatingParams make(RandomSource& rng, std::size_t d_vis, std::size_t k, bool use_mlp) {
    GatingParams p;
    p.use_mlp = use_mlp;
    if (use_mlp) p.mlp = MlpParams::make(rng, d_vis, d_vis, k);
    else p.lin = LinearParams::make(rng, d_vis, k);
    return p;
  }

  std::size_t arity() const { return use_mlp ? mlp.d_out() : lin.w.shape[1]; }

  /// Routing scores r = G(t_vis), one row of K scores per token.
  Var route(Graph& g, Var vis_tokens, bool trainable) {
    return use_mlp ? mlp.apply(g, vis_tokens, trainable) : lin.apply(g, vis_tokens, trainable);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    if (use_mlp) mlp.visit(prefix + ".mlp", fn);
    else lin.visit(prefix + ".lin", fn);
  }
};

/// Residual-transfer head: t_vis + lambda * M(t_exp).
struct FusionParams {
  MlpParams mlp;  // d_lang -> d_lang, second layer zero-initialized
  double lambda = 0.1;

  static FusionParams make(RandomSource& rng, std::size_t d_lang, double lambda) {
    TOVE_CHECK(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0,1]");
    FusionParams p;
    p.mlp = MlpParams::make(rng, d_lang, d_lang, d_lang, /*zero_out=*/true);
    p.lambda = lambda;
    return p;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) { mlp.visit(prefix + ".mlp", fn); }
};

enum class TransferStrategy { Residual, Direct, Concat };

struct RoutingState {
  Tensor scores;             // [N x K]
  Tensor weights;            // [N x K] ensemble weights actually used
  std::vector<int> retained; // sorted expert ids
  bool noise_enabled = false;
};

inline std::vector<int> all_experts(std::size_t k) {
  std::vector<int> v(k);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// Ensemble weights w = softmax(mask(r) + noise). Scores of detached experts
/// are set to -inf before the softmax so their weights come back exactly 0;
/// exploration noise ~ N(0, 1/K^2) is added to retained entries only, and only
/// while training. Noise is drawn row-major over (token, retained expert).
inline Var ensemble_weights(Graph& g, Var scores, RandomSource* noise_rng,
                            const std::vector<int>& retained) {
  const Tensor& r = g.value(scores);
  const std::size_t n = r.rows(), k = r.cols();
  TOVE_CHECK(!retained.empty(), "retained expert set must not be empty");
  for (int id : retained)
    TOVE_CHECK(id >= 0 && static_cast<std::size_t>(id) < k, "retained id out of range");

  Tensor add({n, k});
  std::vector<bool> keep(k, false);
  for (int id : retained) keep[static_cast<std::size_t>(id)] = true;
  const double noise_std = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      if (!keep[c]) add.data[i * k + c] = -std::numeric_limits<double>::infinity();
      else if (noise_rng) add.data[i * k + c] = noise_rng->gaussian(0.0, noise_std);
    }
  return g.softmax_rows(scores, &add);
}

/// Noise-free ensemble weights on plain data (evaluation / metrics path).
inline Tensor ensemble_weights_value(const Tensor& scores, const std::vector<int>& retained) {
  Graph g;
  Var s = g.input(scores);
  return g.value(ensemble_weights(g, s, nullptr, retained));
}

/// t_exp as the weighted convex combination of projected expert tokens.
inline Var ensemble_expert_tokens(Graph& g, Var weights, const std::vector<Var>& projected) {
  return g.weighted_sum(weights, projected);
}

inline Var fuse_residual(Graph& g, FusionParams& fusion, Var t_vis, Var t_exp, bool trainable) {
  Var m = fusion.mlp.apply(g, t_exp, trainable);
  return g.add_scaled(t_vis, m, fusion.lambda);
}

inline Var fuse_direct(Graph& g, Var t_vis, Var t_exp) { return g.add(t_vis, t_exp); }

inline Var fuse_concat(Graph& g, Var t_vis, Var t_exp) { return g.concat_rows(t_vis, t_exp); }

// ----- contribution statistics ------------------------------------------------

/// Running mean ensemble weight per expert over every token seen in training;
/// the ranking key for detachment.
struct ContributionStats {
  std::vector<double> mean;
  double count = 0.0;

  static ContributionStats make(std::size_t k) {
    ContributionStats s;
    s.mean.assign(k, 0.0);
    return s;
  }

  void update(const Tensor& weights) {
    const std::size_t n = weights.rows(), k = weights.cols();
    TOVE_CHECK(k == mean.size(), "contribution stats arity mismatch");
    if (n == 0) return;
    std::vector<double> batch(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) batch[c] += weights.data[i * k + c];
    const double total = count + static_cast<double>(n);
    for (std::size_t c = 0; c < k; ++c) mean[c] = (mean[c] * count + batch[c]) / total;
    count = total;
  }
};

/// Expert ids in descending order of contribution; ties break toward the
/// lower id so the ranking is deterministic.
inline std::vector<int> rank_experts(const ContributionStats& stats) {
  std::vector<int> ids(stats.mean.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (stats.mean[static_cast<std::size_t>(a)] != stats.mean[static_cast<std::size_t>(b)])
      return stats.mean[static_cast<std::size_t>(a)] > stats.mean[static_cast<std::size_t>(b)];
    return a < b;
  });
  return ids;
}

/// Mean row entropy (nats) of a stochastic weight matrix.
inline double routing_entropy(const Tensor& weights) {
  const std::size_t n = weights.rows(), k = weights.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double w = weights.data[i * k + c];
      if (w > 0.0) total -= w * std::log(w);
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace tove
