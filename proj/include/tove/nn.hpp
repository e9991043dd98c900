// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tove/graph.hpp"
#include "tove/random.hpp"
#include "tove/tensor.hpp"

namespace tove {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

/// He-style fan-in init for weights feeding a GeLU; plain fan-in otherwise.
inline Tensor init_weight(RandomSource& rng, std::size_t fan_in, std::size_t fan_out, bool pre_gelu) {
  const double std = std::sqrt((pre_gelu ? 2.0 : 1.0) / static_cast<double>(fan_in));
  return rng.gaussian_tensor({fan_in, fan_out}, 0.0, std);
}

struct LinearParams {
  Tensor w, b;

  static LinearParams make(RandomSource& rng, std::size_t d_in, std::size_t d_out,
                           bool pre_gelu = false, bool zero = false) {
    LinearParams p;
    p.w = zero ? zeros({d_in, d_out}) : init_weight(rng, d_in, d_out, pre_gelu);
    p.b = zeros({d_out});
    return p;
  }

  Var apply(Graph& g, Var x, bool trainable) {
    Var wv = trainable ? g.param(w) : g.frozen(w);
    Var bv = trainable ? g.param(b) : g.frozen(b);
    return g.linear(x, wv, bv);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

/// Two-layer perceptron with a GeLU between the layers:
/// y = w2 . gelu(w1 . x + b1) + b2, applied along the last dimension.
struct MlpParams {
  Tensor w1, b1, w2, b2;

  static MlpParams make(RandomSource& rng, std::size_t d_in, std::size_t d_h, std::size_t d_out,
                        bool zero_out = false) {
    MlpParams p;
    p.w1 = init_weight(rng, d_in, d_h, true);
    p.b1 = zeros({d_h});
    p.w2 = zero_out ? zeros({d_h, d_out}) : init_weight(rng, d_h, d_out, false);
    p.b2 = zeros({d_out});
    return p;
  }

  std::size_t d_in() const { return w1.shape[0]; }
  std::size_t d_out() const { return w2.shape[1]; }

  void check_dims() const {
    TOVE_CHECK(w1.shape[1] == b1.size() && b1.size() == w2.shape[0],
               "mlp: inner dimensions disagree");
    TOVE_CHECK(w2.shape[1] == b2.size(), "mlp: output bias mismatch");
  }

  Var apply(Graph& g, Var x, bool trainable) {
    check_dims();
    TOVE_CHECK(g.value(x).cols() == w1.shape[0], "mlp: input dim mismatch");
    auto p = [&](Tensor& t) { return trainable ? g.param(t) : g.frozen(t); };
    Var h = g.gelu(g.linear(x, p(w1), p(b1)));
    return g.linear(h, p(w2), p(b2));
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

/// Value-level forward for callers that just want numbers.
inline Tensor mlp_forward(MlpParams& p, const Tensor& x) {
  Graph g;
  Var y = p.apply(g, g.input(x), false);
  return g.value(y);
}

struct LayerNormParams {
  Tensor gamma, beta;

  static LayerNormParams make(std::size_t d) {
    LayerNormParams p;
    p.gamma = full({d}, 1.0);
    p.beta = zeros({d});
    return p;
  }

  Var apply(Graph& g, Var x, bool trainable) {
    auto p = [&](Tensor& t) { return trainable ? g.param(t) : g.frozen(t); };
    return g.layernorm(x, p(gamma), p(beta));
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

struct AttentionParams {
  LinearParams q, k, v, o;

  static AttentionParams make(RandomSource& rng, std::size_t d) {
    AttentionParams p;
    p.q = LinearParams::make(rng, d, d);
    p.k = LinearParams::make(rng, d, d);
    p.v = LinearParams::make(rng, d, d);
    p.o = LinearParams::make(rng, d, d);
    return p;
  }

  /// queries from `x`, keys/values from `ctx` (pass x for self-attention).
  Var apply(Graph& g, Var x, Var ctx, std::size_t heads, bool causal, bool trainable) {
    Var qv = q.apply(g, x, trainable);
    Var kv = k.apply(g, ctx, trainable);
    Var vv = v.apply(g, ctx, trainable);
    Var att = g.attention(qv, kv, vv, heads, causal);
    return o.apply(g, att, trainable);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    o.visit(prefix + ".o", fn);
  }
};

}  // namespace tove
