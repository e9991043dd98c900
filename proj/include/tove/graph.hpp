// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "tove/error.hpp"
#include "tove/ops.hpp"
#include "tove/tensor.hpp"

namespace tove {

/// Reverse-mode tape over whole tensors. A Graph records one forward pass;
/// backward() walks the tape in reverse creation order (nodes only consume
/// earlier nodes, so that order is a valid reverse topological sort).
///
/// Leaves registered through param()/frozen() reference external Tensors.
/// After backward(), trainable leaves have d(loss)/d(leaf) accumulated into
/// the external tensor's grad slot; frozen leaves receive none. A leaf that
/// never reaches the loss simply keeps a zero gradient - that is not an
/// error (detached branches are expected to go silent).
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  // ----- leaf registration -------------------------------------------------

  /// Trainable leaf. Gradients are accumulated into p.grad by backward().
  Var param(Tensor& p) { return make_leaf(&p, Tensor(p), true); }

  /// Frozen leaf: participates in the forward pass, never receives gradient.
  Var frozen(const Tensor& p) { return make_leaf(nullptr, Tensor(p), false); }

  /// Constant input data (same as frozen, for values rather than parameters).
  Var input(Tensor v) { return make_leaf(nullptr, std::move(v), false); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  const std::vector<double>& grad_of(Var v) const { return nodes_[check(v)].grad; }

  std::size_t node_count() const { return nodes_.size(); }

  // ----- elementwise and linear algebra ------------------------------------

  Var add(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.same_shape(y), "add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += y.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n, Graph& g) {
      g.push_grad(n.parents[0], n.grad);
      g.push_grad(n.parents[1], n.grad);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.same_shape(y), "sub: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= y.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n, Graph& g) {
      g.push_grad(n.parents[0], n.grad);
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> gneg(n.grad.size());
        for (std::size_t i = 0; i < gneg.size(); ++i) gneg[i] = -n.grad[i];
        g.push_grad(n.parents[1], gneg);
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.same_shape(y), "mul: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= y.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n, Graph& g) {
      const Tensor& x = g.value(n.parents[0]);
      const Tensor& y = g.value(n.parents[1]);
      if (g.wants_grad(n.parents[0])) {
        std::vector<double> gx(n.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = n.grad[i] * y.data[i];
        g.push_grad(n.parents[0], gx);
      }
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> gy(n.grad.size());
        for (std::size_t i = 0; i < gy.size(); ++i) gy[i] = n.grad[i] * x.data[i];
        g.push_grad(n.parents[1], gy);
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    return make_node(std::move(out), {a}, [c](Node& n, Graph& g) {
      std::vector<double> gx(n.grad.size());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = n.grad[i] * c;
      g.push_grad(n.parents[0], gx);
    });
  }

  /// a + c * b (shapes equal). The residual-transfer workhorse.
  Var add_scaled(Var a, Var b, double c) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.same_shape(y), "add_scaled: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c * y.data[i];
    return make_node(std::move(out), {a, b}, [c](Node& n, Graph& g) {
      g.push_grad(n.parents[0], n.grad);
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> gy(n.grad.size());
        for (std::size_t i = 0; i < gy.size(); ++i) gy[i] = c * n.grad[i];
        g.push_grad(n.parents[1], gy);
      }
    });
  }

  /// Adds plain data (no gradient path through the addend): masks, noise.
  Var add_const(Var a, const Tensor& c) {
    const Tensor& x = value(a);
    TOVE_CHECK(x.same_shape(c), "add_const: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
    return make_node(std::move(out), {a},
                     [](Node& n, Graph& g) { g.push_grad(n.parents[0], n.grad); });
  }

  /// [n x d] + [d], broadcast over rows.
  Var add_rowvec(Var a, Var v) {
    const Tensor& x = value(a);
    const Tensor& b = value(v);
    const std::size_t d = x.cols();
    TOVE_CHECK(b.size() == d, "add_rowvec: vector length mismatch");
    Tensor out = x;
    const std::size_t n = x.rows();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] += b.data[c];
    return make_node(std::move(out), {a, v}, [n, d](Node& nn, Graph& g) {
      g.push_grad(nn.parents[0], nn.grad);
      if (g.wants_grad(nn.parents[1])) {
        std::vector<double> gb(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) gb[c] += nn.grad[r * d + c];
        g.push_grad(nn.parents[1], gb);
      }
    });
  }

  /// [n x k] . [k x m]
  Var matmul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.rank() >= 1 && y.rank() == 2, "matmul: rank");
    const std::size_t k = x.cols(), n = x.rows();
    TOVE_CHECK(y.shape[0] == k, "matmul: inner dims " + shape_str(x.shape) + " . " + shape_str(y.shape));
    const std::size_t m = y.shape[1];
    Tensor out({n, m});
    mat_mul_nn(x.data.data(), y.data.data(), out.data.data(), n, k, m);
    return make_node(std::move(out), {a, b}, [n, k, m](Node& nn, Graph& g) {
      const Tensor& x = g.value(nn.parents[0]);
      const Tensor& y = g.value(nn.parents[1]);
      if (g.wants_grad(nn.parents[0])) {
        std::vector<double> gx(n * k, 0.0);  // g . y^T
        mat_mul_nt(nn.grad.data(), y.data.data(), gx.data(), n, m, k);
        g.push_grad(nn.parents[0], gx);
      }
      if (g.wants_grad(nn.parents[1])) {
        std::vector<double> gy(k * m, 0.0);  // x^T . g
        mat_mul_tn(x.data.data(), nn.grad.data(), gy.data(), n, k, m);
        g.push_grad(nn.parents[1], gy);
      }
    });
  }

  /// Row-wise two-layer perceptron building block: x . W + b.
  Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

  Var gelu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = gelu_scalar(v);
    return make_node(std::move(out), {a}, [](Node& n, Graph& g) {
      const Tensor& x = g.value(n.parents[0]);
      std::vector<double> gx(n.grad.size());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = n.grad[i] * gelu_grad_scalar(x.data[i]);
      g.push_grad(n.parents[0], gx);
    });
  }

  /// Row-wise softmax with an optional additive data mask (use -inf to mask
  /// a column out; masked entries come back exactly 0).
  Var softmax_rows(Var a, const Tensor* addmask = nullptr) {
    const Tensor& x = value(a);
    const std::size_t n = x.rows(), d = x.cols();
    if (addmask) TOVE_CHECK(addmask->same_shape(x), "softmax_rows: mask shape");
    Tensor out = x;
    std::vector<double> row(d);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c)
        row[c] = x.data[r * d + c] + (addmask ? addmask->data[r * d + c] : 0.0);
      softmax_stable_inplace(row);
      for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = row[c];
    }
    return make_node(std::move(out), {a}, [n, d](Node& nn, Graph& g) {
      const std::vector<double>& y = nn.value.data;  // saved probabilities
      std::vector<double> gx(n * d);
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += nn.grad[r * d + c] * y[r * d + c];
        for (std::size_t c = 0; c < d; ++c)
          gx[r * d + c] = y[r * d + c] * (nn.grad[r * d + c] - dot);
      }
      g.push_grad(nn.parents[0], gx);
    });
  }

  /// Rows of an embedding table selected by id; VJP scatter-adds.
  Var rows_lookup(Var table, const std::vector<int>& ids) {
    const Tensor& t = value(table);
    TOVE_CHECK(t.rank() == 2, "rows_lookup: table must be 2-d");
    const std::size_t d = t.shape[1];
    for (int id : ids)
      TOVE_CHECK(id >= 0 && static_cast<std::size_t>(id) < t.shape[0], "rows_lookup: id out of range");
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = t.data[ids[r] * d + c];
    return make_node(std::move(out), {table}, [ids, d](Node& n, Graph& g) {
      if (!g.wants_grad(n.parents[0])) return;
      const Tensor& t = g.value(n.parents[0]);
      std::vector<double> gt(t.size(), 0.0);
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) gt[ids[r] * d + c] += n.grad[r * d + c];
      g.push_grad(n.parents[0], gt);
    });
  }

  Var concat_rows(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.cols() == y.cols(), "concat_rows: column mismatch");
    const std::size_t d = x.cols(), n0 = x.rows(), n1 = y.rows();
    Tensor out({n0 + n1, d});
    std::copy(x.data.begin(), x.data.end(), out.data.begin());
    std::copy(y.data.begin(), y.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(n0 * d));
    return make_node(std::move(out), {a, b}, [n0, n1, d](Node& n, Graph& g) {
      if (g.wants_grad(n.parents[0]))
        g.push_grad(n.parents[0], std::vector<double>(n.grad.begin(), n.grad.begin() + static_cast<std::ptrdiff_t>(n0 * d)));
      if (g.wants_grad(n.parents[1]))
        g.push_grad(n.parents[1], std::vector<double>(n.grad.begin() + static_cast<std::ptrdiff_t>(n0 * d), n.grad.end()));
    });
  }

  /// Reinterpret shape (row-major layout preserved).
  Var reshape(Var a, std::vector<std::size_t> shape) {
    const Tensor& x = value(a);
    TOVE_CHECK(Tensor::count_of(shape) == x.size(), "reshape: element count mismatch");
    Tensor out(std::move(shape), x.data);
    return make_node(std::move(out), {a},
                     [](Node& n, Graph& g) { g.push_grad(n.parents[0], n.grad); });
  }

  Var sum(Var a) {
    const Tensor& x = value(a);
    double s = 0.0;
    for (double v : x.data) s += v;
    return make_node(scalar(s), {a}, [](Node& n, Graph& g) {
      const Tensor& x = g.value(n.parents[0]);
      g.push_grad(n.parents[0], std::vector<double>(x.size(), n.grad[0]));
    });
  }

  /// Column sums of [n x k] -> [k]. (Per-expert importance accumulator.)
  Var col_sums(Var a) {
    const Tensor& x = value(a);
    const std::size_t n = x.rows(), k = x.cols();
    Tensor out({k});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) out.data[c] += x.data[r * k + c];
    return make_node(std::move(out), {a}, [n, k](Node& nn, Graph& g) {
      std::vector<double> gx(n * k);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < k; ++c) gx[r * k + c] = nn.grad[c];
      g.push_grad(nn.parents[0], gx);
    });
  }

  /// Squared coefficient of variation of a vector, population std:
  /// cv2(v) = var_pop(v) / mean(v)^2.
  Var cv_squared(Var a) {
    const Tensor& x = value(a);
    const std::size_t k = x.size();
    TOVE_CHECK(k >= 1, "cv_squared: empty input");
    double mu = 0.0;
    for (double v : x.data) mu += v;
    mu /= static_cast<double>(k);
    TOVE_CHECK(mu != 0.0, "cv_squared: zero mean");
    double var = 0.0;
    for (double v : x.data) var += (v - mu) * (v - mu);
    var /= static_cast<double>(k);
    const double loss = var / (mu * mu);
    return make_node(scalar(loss), {a}, [k, mu, var](Node& n, Graph& g) {
      const Tensor& x = g.value(n.parents[0]);
      std::vector<double> gx(k);
      const double kk = static_cast<double>(k);
      for (std::size_t i = 0; i < k; ++i)
        gx[i] = n.grad[0] * (2.0 / (kk * mu * mu)) * ((x.data[i] - mu) - var / mu);
      g.push_grad(n.parents[0], gx);
    });
  }

  /// Mean cross-entropy over non-ignored positions.
  /// logits [L x V]; targets.size() == L; positions equal to ignore_index
  /// contribute nothing. Errors: target out of range, or all ignored.
  Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index) {
    const Tensor& x = value(logits);
    const std::size_t L = x.rows(), V = x.cols();
    TOVE_CHECK(targets.size() == L, "cross_entropy: target count mismatch");
    std::size_t counted = 0;
    double total = 0.0;
    std::vector<double> lse(L);
    for (std::size_t r = 0; r < L; ++r) {
      if (targets[r] == ignore_index) continue;
      TOVE_CHECK(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < V,
                 "cross_entropy: target out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, x.data[r * V + c]);
      double s = 0.0;
      for (std::size_t c = 0; c < V; ++c) s += std::exp(x.data[r * V + c] - mx);
      lse[r] = mx + std::log(s);
      total += lse[r] - x.data[r * V + static_cast<std::size_t>(targets[r])];
      ++counted;
    }
    TOVE_CHECK(counted > 0, "cross_entropy: all positions ignored");
    const double inv = 1.0 / static_cast<double>(counted);
    return make_node(scalar(total * inv), {logits},
                     [targets, ignore_index, L, V, lse, inv](Node& n, Graph& g) {
                       const Tensor& x = g.value(n.parents[0]);
                       std::vector<double> gx(L * V, 0.0);
                       for (std::size_t r = 0; r < L; ++r) {
                         if (targets[r] == ignore_index) continue;
                         for (std::size_t c = 0; c < V; ++c) {
                           double p = std::exp(x.data[r * V + c] - lse[r]);
                           double oh = (static_cast<std::size_t>(targets[r]) == c) ? 1.0 : 0.0;
                           gx[r * V + c] = n.grad[0] * inv * (p - oh);
                         }
                       }
                       g.push_grad(n.parents[0], gx);
                     });
  }

  /// Convex combination of K projected expert token sets:
  /// out[i] = sum_k w[i,k] * parts[k][i].
  Var weighted_sum(Var w, const std::vector<Var>& parts) {
    const Tensor& wt = value(w);
    const std::size_t n = wt.rows(), k = wt.cols();
    TOVE_CHECK(parts.size() == k, "weighted_sum: expert count mismatch");
    std::size_t d = value(parts[0]).cols();
    for (const Var& p : parts) {
      TOVE_CHECK(value(p).rows() == n && value(p).cols() == d, "weighted_sum: part shape mismatch");
    }
    Tensor out({n, d});
    for (std::size_t j = 0; j < k; ++j) {
      const Tensor& pj = value(parts[j]);
      for (std::size_t r = 0; r < n; ++r) {
        const double wv = wt.data[r * k + j];
        if (wv == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] += wv * pj.data[r * d + c];
      }
    }
    std::vector<Var> all{w};
    all.insert(all.end(), parts.begin(), parts.end());
    return make_node(std::move(out), all, [n, k, d](Node& nn, Graph& g) {
      const Tensor& wt = g.value(nn.parents[0]);
      if (g.wants_grad(nn.parents[0])) {
        std::vector<double> gw(n * k, 0.0);
        for (std::size_t j = 0; j < k; ++j) {
          const Tensor& pj = g.value(nn.parents[1 + j]);
          for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += nn.grad[r * d + c] * pj.data[r * d + c];
            gw[r * k + j] = dot;
          }
        }
        g.push_grad(nn.parents[0], gw);
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (!g.wants_grad(nn.parents[1 + j])) continue;
        std::vector<double> gp(n * d);
        for (std::size_t r = 0; r < n; ++r) {
          const double wv = wt.data[r * k + j];
          for (std::size_t c = 0; c < d; ++c) gp[r * d + c] = wv * nn.grad[r * d + c];
        }
        g.push_grad(nn.parents[1 + j], gp);
      }
    });
  }

  /// Fused multi-head scaled-dot-product attention.
  /// q [Lq x d], k/v [Lk x d]; d divisible by heads; causal masks j > i.
  Var attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
    const Tensor& qt = value(q);
    const Tensor& kt = value(k);
    const Tensor& vt = value(v);
    const std::size_t lq = qt.rows(), lk = kt.rows(), d = qt.cols();
    TOVE_CHECK(kt.cols() == d && vt.cols() == d && vt.rows() == lk, "attention: shape mismatch");
    TOVE_CHECK(heads >= 1 && d % heads == 0, "attention: head split");
    if (causal) TOVE_CHECK(lq == lk, "attention: causal requires square attention");
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs saved per head for the backward pass
    auto probs = std::make_shared<std::vector<double>>(heads * lq * lk, 0.0);
    Tensor out({lq, d});
    std::vector<double> row(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t jmax = causal ? i + 1 : lk;
        for (std::size_t j = 0; j < jmax; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s += qt.data[i * d + off + c] * kt.data[j * d + off + c];
          row[j] = s * inv_sqrt;
        }
        for (std::size_t j = jmax; j < lk; ++j) row[j] = -std::numeric_limits<double>::infinity();
        softmax_stable_inplace(row);
        double* prow = probs->data() + (h * lq + i) * lk;
        for (std::size_t j = 0; j < lk; ++j) prow[j] = row[j];
        for (std::size_t j = 0; j < jmax; ++j) {
          const double p = row[j];
          if (p == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c)
            out.data[i * d + off + c] += p * vt.data[j * d + off + c];
        }
      }
    }
    return make_node(std::move(out), {q, k, v},
                     [heads, lq, lk, d, dh, inv_sqrt, probs](Node& n, Graph& g) {
      const Tensor& qt = g.value(n.parents[0]);
      const Tensor& kt = g.value(n.parents[1]);
      const Tensor& vt = g.value(n.parents[2]);
      std::vector<double> gq(lq * d, 0.0), gk(lk * d, 0.0), gv(lk * d, 0.0);
      std::vector<double> dp(lk), ds(lk);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < lq; ++i) {
          const double* prow = probs->data() + (h * lq + i) * lk;
          // dP = dOut . V^T ; dV += P^T . dOut
          for (std::size_t j = 0; j < lk; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c)
              s += n.grad[i * d + off + c] * vt.data[j * d + off + c];
            dp[j] = s;
            if (prow[j] != 0.0)
              for (std::size_t c = 0; c < dh; ++c)
                gv[j * d + off + c] += prow[j] * n.grad[i * d + off + c];
          }
          // softmax VJP
          double dot = 0.0;
          for (std::size_t j = 0; j < lk; ++j) dot += dp[j] * prow[j];
          for (std::size_t j = 0; j < lk; ++j) ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt;
          // dQ += dS . K ; dK += dS^T . Q
          for (std::size_t j = 0; j < lk; ++j) {
            if (ds[j] == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) {
              gq[i * d + off + c] += ds[j] * kt.data[j * d + off + c];
              gk[j * d + off + c] += ds[j] * qt.data[i * d + off + c];
            }
          }
        }
      }
      if (g.wants_grad(n.parents[0])) g.push_grad(n.parents[0], gq);
      if (g.wants_grad(n.parents[1])) g.push_grad(n.parents[1], gk);
      if (g.wants_grad(n.parents[2])) g.push_grad(n.parents[2], gv);
    });
  }

  /// Row-wise layer normalization with affine scale/shift.
  Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor& xt = value(x);
    const std::size_t n = xt.rows(), d = xt.cols();
    TOVE_CHECK(value(gamma).size() == d && value(beta).size() == d, "layernorm: affine dims");
    Tensor out({n, d});
    auto stats = std::make_shared<std::vector<double>>(2 * n);  // mean, rstd per row
    const Tensor& g0 = value(gamma);
    const Tensor& b0 = value(beta);
    for (std::size_t r = 0; r < n; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < d; ++c) mu += xt.data[r * d + c];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = xt.data[r * d + c] - mu;
        var += t * t;
      }
      var /= static_cast<double>(d);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * r] = mu;
      (*stats)[2 * r + 1] = rstd;
      for (std::size_t c = 0; c < d; ++c)
        out.data[r * d + c] = (xt.data[r * d + c] - mu) * rstd * g0.data[c] + b0.data[c];
    }
    return make_node(std::move(out), {x, gamma, beta}, [n, d, stats](Node& nn, Graph& g) {
      const Tensor& xt = g.value(nn.parents[0]);
      const Tensor& g0 = g.value(nn.parents[1]);
      std::vector<double> gx(n * d, 0.0), gg(d, 0.0), gb(d, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const double mu = (*stats)[2 * r], rstd = (*stats)[2 * r + 1];
        double sum_dy_g = 0.0, sum_dy_g_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double xhat = (xt.data[r * d + c] - mu) * rstd;
          const double dy = nn.grad[r * d + c];
          gg[c] += dy * xhat;
          gb[c] += dy;
          const double dyg = dy * g0.data[c];
          sum_dy_g += dyg;
          sum_dy_g_xhat += dyg * xhat;
        }
        const double invd = 1.0 / static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
          const double xhat = (xt.data[r * d + c] - mu) * rstd;
          const double dyg = nn.grad[r * d + c] * g0.data[c];
          gx[r * d + c] = rstd * (dyg - invd * sum_dy_g - xhat * invd * sum_dy_g_xhat);
        }
      }
      if (g.wants_grad(nn.parents[0])) g.push_grad(nn.parents[0], gx);
      if (g.wants_grad(nn.parents[1])) g.push_grad(nn.parents[1], gg);
      if (g.wants_grad(nn.parents[2])) g.push_grad(nn.parents[2], gb);
    });
  }

  /// 2-d convolution over [H x W x Cin] with kernel [kh x kw x Cin x Cout],
  /// zero padding `pad` on each side, square stride.
  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Tensor& xt = value(x);
    const Tensor& wt = value(w);
    TOVE_CHECK(xt.rank() == 3 && wt.rank() == 4, "conv2d: ranks");
    const std::size_t H = xt.shape[0], W = xt.shape[1], Cin = xt.shape[2];
    const std::size_t kh = wt.shape[0], kw = wt.shape[1];
    TOVE_CHECK(wt.shape[2] == Cin, "conv2d: input channels");
    const std::size_t Cout = wt.shape[3];
    TOVE_CHECK(value(b).size() == Cout, "conv2d: bias");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out({Ho, Wo, Cout});
    const Tensor& bt = value(b);
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t co = 0; co < Cout; ++co) {
          double s = bt.data[co];
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              for (std::size_t ci = 0; ci < Cin; ++ci)
                s += xt.data[(static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin + ci] *
                     wt.data[((ky * kw + kx) * Cin + ci) * Cout + co];
            }
          }
          out.data[(oy * Wo + ox) * Cout + co] = s;
        }
    return make_node(std::move(out), {x, w, b},
                     [H, W, Cin, kh, kw, Cout, Ho, Wo, stride, pad](Node& n, Graph& g) {
      const Tensor& xt = g.value(n.parents[0]);
      const Tensor& wt = g.value(n.parents[1]);
      std::vector<double> gx(xt.size(), 0.0), gw(wt.size(), 0.0), gb(Cout, 0.0);
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox)
          for (std::size_t co = 0; co < Cout; ++co) {
            const double go = n.grad[(oy * Wo + ox) * Cout + co];
            if (go == 0.0) continue;
            gb[co] += go;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                  const std::size_t xi = (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin + ci;
                  const std::size_t wi = ((ky * kw + kx) * Cin + ci) * Cout + co;
                  gx[xi] += go * wt.data[wi];
                  gw[wi] += go * xt.data[xi];
                }
              }
            }
          }
      if (g.wants_grad(n.parents[0])) g.push_grad(n.parents[0], gx);
      if (g.wants_grad(n.parents[1])) g.push_grad(n.parents[1], gw);
      if (g.wants_grad(n.parents[2])) g.push_grad(n.parents[2], gb);
    });
  }

  /// Bilinear token-grid resize, align-corners convention; rows of x are a
  /// (hs x ws) grid, channels last. Exact identity when grids match.
  Var bilinear_resize(Var x, std::size_t hs, std::size_t ws, std::size_t hd, std::size_t wd) {
    const Tensor& xt = value(x);
    TOVE_CHECK(hs >= 1 && ws >= 1 && hd >= 1 && wd >= 1, "bilinear_resize: empty grid");
    TOVE_CHECK(xt.rows() == hs * ws, "bilinear_resize: row count != source grid");
    const std::size_t d = xt.cols();
    if (hs == hd && ws == wd) {
      Tensor out = xt;
      return make_node(std::move(out), {x},
                       [](Node& n, Graph& g) { g.push_grad(n.parents[0], n.grad); });
    }
    // Precompute interpolation weights per output cell: 4 taps.
    struct Tap { std::size_t idx; double w; };
    auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(hd * wd);
    auto axis = [](std::size_t dst, std::size_t src, std::size_t i) {
      if (dst == 1) return std::pair<std::size_t, double>{(src - 1) / 2, (src % 2 == 1) ? 0.0 : 0.5};
      const double pos = static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
      std::size_t lo = static_cast<std::size_t>(pos);
      if (lo >= src - 1 && src > 1) lo = src - 2;
      double frac = (src == 1) ? 0.0 : pos - static_cast<double>(lo);
      if (src == 1) lo = 0;
      return std::pair<std::size_t, double>{lo, frac};
    };
    for (std::size_t oy = 0; oy < hd; ++oy) {
      auto [y0, fy] = axis(hd, hs, oy);
      const std::size_t y1 = (hs == 1) ? y0 : y0 + 1;
      for (std::size_t ox = 0; ox < wd; ++ox) {
        auto [x0, fx] = axis(wd, ws, ox);
        const std::size_t x1 = (ws == 1) ? x0 : x0 + 1;
        (*taps)[oy * wd + ox] = {Tap{y0 * ws + x0, (1 - fy) * (1 - fx)}, Tap{y0 * ws + x1, (1 - fy) * fx},
                                 Tap{y1 * ws + x0, fy * (1 - fx)}, Tap{y1 * ws + x1, fy * fx}};
      }
    }
    Tensor out({hd * wd, d});
    for (std::size_t o = 0; o < hd * wd; ++o)
      for (const Tap& t : (*taps)[o]) {
        if (t.w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) out.data[o * d + c] += t.w * xt.data[t.idx * d + c];
      }
    return make_node(std::move(out), {x}, [taps, hd, wd, hs, ws, d](Node& n, Graph& g) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> gx(hs * ws * d, 0.0);
      for (std::size_t o = 0; o < hd * wd; ++o)
        for (const auto& t : (*taps)[o]) {
          if (t.w == 0.0) continue;
          for (std::size_t c = 0; c < d; ++c) gx[t.idx * d + c] += t.w * n.grad[o * d + c];
        }
      g.push_grad(n.parents[0], gx);
    });
  }

  /// Mean over rows of the euclidean distance ||a_i - b_i||_2.
  /// Zero-distance rows get zero (sub)gradient.
  Var gap_l2(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    TOVE_CHECK(x.same_shape(y), "gap_l2: shape mismatch");
    const std::size_t n = x.rows(), d = x.cols();
    auto norms = std::make_shared<std::vector<double>>(n, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = x.data[r * d + c] - y.data[r * d + c];
        s += t * t;
      }
      (*norms)[r] = std::sqrt(s);
      total += (*norms)[r];
    }
    const double inv = 1.0 / static_cast<double>(n);
    return make_node(scalar(total * inv), {a, b}, [n, d, norms, inv](Node& nn, Graph& g) {
      const Tensor& x = g.value(nn.parents[0]);
      const Tensor& y = g.value(nn.parents[1]);
      std::vector<double> gx(n * d, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        if ((*norms)[r] == 0.0) continue;
        const double s = nn.grad[0] * inv / (*norms)[r];
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] = s * (x.data[r * d + c] - y.data[r * d + c]);
      }
      if (g.wants_grad(nn.parents[0])) g.push_grad(nn.parents[0], gx);
      if (g.wants_grad(nn.parents[1])) {
        for (double& v : gx) v = -v;
        g.push_grad(nn.parents[1], gx);
      }
    });
  }

  /// Smooth load-balancing loss (cv^2 of per-expert loads), where the load of
  /// expert k is the summed probability that k would beat its best competitor
  /// under fresh gaussian score noise of stddev sigma on both:
  ///   p_k(i) = Phi((r_ik - max_{j != k} r_ij) / (sigma * sqrt(2))).
  Var load_balance_loss(Var scores, double sigma) {
    TOVE_CHECK(sigma > 0.0, "load_balance_loss: sigma must be positive");
    const Tensor& r = value(scores);
    const std::size_t n = r.rows(), k = r.cols();
    TOVE_CHECK(k >= 1, "load_balance_loss: no experts");
    const double denom = sigma * std::sqrt(2.0);
    auto rival = std::make_shared<std::vector<std::size_t>>(n * k);  // argmax over j != k
    std::vector<double> load(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t bj = c;
        for (std::size_t j = 0; j < k; ++j) {
          if (j == c) continue;
          if (r.data[i * k + j] > best) {
            best = r.data[i * k + j];
            bj = j;
          }
        }
        (*rival)[i * k + c] = bj;
        const double z = (k == 1) ? std::numeric_limits<double>::infinity()
                                  : (r.data[i * k + c] - best) / denom;
        load[c] += normal_cdf(z);
      }
    }
    double mu = 0.0;
    for (double v : load) mu += v;
    mu /= static_cast<double>(k);
    double var = 0.0;
    for (double v : load) var += (v - mu) * (v - mu);
    var /= static_cast<double>(k);
    const double loss = (mu == 0.0) ? 0.0 : var / (mu * mu);
    return make_node(scalar(loss), {scores}, [n, k, denom, rival, load, mu, var](Node& nn, Graph& g) {
      if (!g.wants_grad(nn.parents[0]) || k == 1) return;
      const Tensor& r = g.value(nn.parents[0]);
      const double kk = static_cast<double>(k);
      // dL/dload_c
      std::vector<double> dload(k);
      for (std::size_t c = 0; c < k; ++c)
        dload[c] = nn.grad[0] * (2.0 / (kk * mu * mu)) * ((load[c] - mu) - var / mu);
      std::vector<double> gx(n * k, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) {
          const std::size_t j = (*rival)[i * k + c];
          const double z = (r.data[i * k + c] - r.data[i * k + j]) / denom;
          const double dphi = normal_pdf(z) / denom;
          gx[i * k + c] += dload[c] * dphi;
          gx[i * k + j] -= dload[c] * dphi;
        }
      g.push_grad(nn.parents[0], gx);
    });
  }

  // ----- backward -----------------------------------------------------------

  /// Populate gradients of the scalar `loss` on every trainable leaf.
  void backward(Var loss) {
    Node& root = nodes_[check(loss)];
    TOVE_CHECK(root.value.size() == 1, "backward: loss must be scalar");
    for (Node& n : nodes_) n.grad.assign(n.grad_needed ? n.value.size() : 0, 0.0);
    if (!root.grad_needed) return;  // loss does not depend on any trainable leaf
    root.grad.assign(1, 1.0);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward_fn || n.grad.empty()) continue;
      bool any = false;
      for (double gv : n.grad)
        if (gv != 0.0) { any = true; break; }
      if (!any && n.id != root.id) continue;
      n.backward_fn(n, *this);
    }
    for (Node& n : nodes_) {
      if (n.sink && n.trainable && !n.grad.empty()) n.sink->accumulate_grad(n.grad);
    }
  }

 private:
  struct Node {
    int id = -1;
    Tensor value;
    std::vector<double> grad;
    std::vector<Var> parents;
    std::function<void(Node&, Graph&)> backward_fn;
    Tensor* sink = nullptr;
    bool trainable = false;
    bool grad_needed = false;  // true iff some trainable leaf is an ancestor
  };

  int check(Var v) const {
    TOVE_CHECK(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid graph handle");
    return v.id;
  }

  bool wants_grad(Var v) const { return nodes_[check(v)].grad_needed; }

  void push_grad(Var v, const std::vector<double>& g) {
    Node& n = nodes_[check(v)];
    if (!n.grad_needed) return;
    TOVE_CHECK(g.size() == n.value.size(), "gradient size mismatch in backward");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  Var make_leaf(Tensor* sink, Tensor v, bool trainable) {
    Node n;
    n.id = static_cast<int>(nodes_.size());
    n.value = std::move(v);
    n.sink = sink;
    n.trainable = trainable;
    n.grad_needed = trainable;
    nodes_.push_back(std::move(n));
    return Var{nodes_.back().id};
  }

  Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&, Graph&)> fn) {
    check_finite(value, "graph op");
    Node n;
    n.id = static_cast<int>(nodes_.size());
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (Var p : n.parents)
      if (nodes_[check(p)].grad_needed) { n.grad_needed = true; break; }
    n.backward_fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.back().id};
  }

  std::vector<Node> nodes_;
};

using Var = Graph::Var;

}  // namespace tove
