// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "tove/graph.hpp"
#include "tove/tensor.hpp"

namespace tove {

/// Every component of the pre-training objective, kept together so the
/// invariants aux = (imp + load)/2 and total = lm + alpha * aux are checkable
/// wherever a breakdown travels (metrics rows, tests, reports).
struct LossBreakdown {
  double lm = 0.0;
  double imp = 0.0;
  double load = 0.0;
  double aux = 0.0;
  double alpha_t = 0.0;
  double total = 0.0;
};

inline double aux_loss(double imp, double load) { return 0.5 * (imp + load); }

inline LossBreakdown pretrain_loss(double lm, double imp, double load, double alpha_t) {
  LossBreakdown b;
  b.lm = lm;
  b.imp = imp;
  b.load = load;
  b.aux = aux_loss(imp, load);
  b.alpha_t = alpha_t;
  b.total = lm + alpha_t * b.aux;
  return b;
}

struct ScheduleConfig {
  double alpha0 = 0.01;
  int total_epochs = 10;
};

/// Cosine relaxation of the balancing coefficient:
/// alpha_t = alpha0 * 0.5 * (1 + cos(pi * t / T)); alpha_T = 0 exactly.
inline double alpha_schedule(const ScheduleConfig& cfg, int t) {
  TOVE_CHECK(cfg.alpha0 >= 0.0 && cfg.total_epochs >= 1, "bad schedule config");
  TOVE_CHECK(t >= 0 && t <= cfg.total_epochs, "epoch out of range for schedule");
  if (t == cfg.total_epochs) return 0.0;  // cos(pi) == -1, pinned exactly
  const double x = 3.14159265358979323846 * static_cast<double>(t) / static_cast<double>(cfg.total_epochs);
  return cfg.alpha0 * 0.5 * (1.0 + std::cos(x));
}

/// Importance loss: squared coefficient of variation of per-expert importance,
/// where importance is the column sum of noise-free ensemble weights.
inline Var importance_loss(Graph& g, Var weights) { return g.cv_squared(g.col_sums(weights)); }

inline double importance_loss_value(const Tensor& weights) {
  Graph g;
  return g.value(importance_loss(g, g.input(weights))).data[0];
}

/// Load loss: squared coefficient of variation of per-expert smooth load; see
/// Graph::load_balance_loss for the probability model.
inline Var load_loss(Graph& g, Var scores, double sigma) {
  return g.load_balance_loss(scores, sigma);
}

inline double load_loss_value(const Tensor& scores, double sigma) {
  Graph g;
  return g.value(load_loss(g, g.input(scores), sigma)).data[0];
}

}  // namespace tove
