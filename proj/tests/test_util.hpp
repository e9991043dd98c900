// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tove/graph.hpp"
#include "tove/tensor.hpp"

namespace tove::testutil {

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // where the worst disagreement happened
  std::size_t checked = 0;
};

/// Central finite differences against the tape. `build` must construct the
/// forward pass from scratch on every call, registering each tensor in
/// `params` via Graph::param.
inline GradCheckResult check_gradients(const std::function<Var(Graph&)>& build,
                                       const std::vector<std::pair<std::string, Tensor*>>& params,
                                       double h = 1e-5) {
  for (auto& [name, t] : params) t->clear_grad();
  Graph g;
  Var loss = build(g);
  g.backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : params) {
    if (t->grad) analytic.push_back(*t->grad);
    else analytic.push_back(std::vector<double>(t->size(), 0.0));
  }

  auto eval = [&]() {
    Graph g2;
    return g2.value(build(g2)).data[0];
  };

  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor* t = params[p].second;
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double keep = t->data[i];
      t->data[i] = keep + h;
      const double fp = eval();
      t->data[i] = keep - h;
      const double fm = eval();
      t->data[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[p][i];
      ++res.checked;
      if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) continue;
      const double e = rel_err(an, fd);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst = params[p].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(an) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  for (auto& [name, t] : params) t->clear_grad();
  return res;
}

}  // namespace tove::testutil
