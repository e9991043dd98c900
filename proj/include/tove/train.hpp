// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "tove/checkpoint.hpp"
#include "tove/config.hpp"
#include "tove/data_io.hpp"
#include "tove/vlm.hpp"

namespace tove {

// ----- prepared data -----------------------------------------------------------

struct PreparedSample {
  Scene scene;
  RenderedSample rendered;
  TokenizedCaption caption;
};

struct Dataset {
  std::vector<PreparedSample> samples;
  std::size_t size() const { return samples.size(); }
};

inline Dataset prepare_dataset(const std::vector<Scene>& scenes, std::size_t vocab) {
  CaptionGrammar grammar;
  Dataset d;
  d.samples.reserve(scenes.size());
  for (const Scene& s : scenes) {
    PreparedSample ps;
    ps.scene = s;
    ps.rendered = render(s, grammar);
    ps.caption = TokenizedCaption::make(ps.rendered.caption, static_cast<int>(vocab));
    d.samples.push_back(std::move(ps));
  }
  return d;
}

// ----- parameter collection ------------------------------------------------------

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

/// Everything the pre-train / fine-tune optimizer may touch: the base
/// encoder never trains; adaptor tensors appear only when enabled.
inline std::vector<ParamRef> trainable_parameters(ToveModel& m) {
  std::vector<ParamRef> out;
  m.visit([&](const std::string& name, Tensor& t) {
    if (name.rfind("encoder", 0) == 0) return;
    out.push_back({name, &t});
  });
  return out;
}

// ----- optimizers ----------------------------------------------------------------

/// Plain SGD; AdamW as the optional second optimizer (beta1 0.9, beta2 0.999,
/// eps 1e-8, decoupled weight decay 0.05).
class Optimizer {
 public:
  Optimizer(std::vector<ParamRef> params, const RunConfig& cfg, double lr_override = -1.0)
      : params_(std::move(params)),
        kind_(cfg.optimizer),
        lr_(lr_override > 0 ? lr_override : cfg.lr),
        weight_decay_(cfg.weight_decay) {
    if (kind_ == OptimizerKind::AdamW) {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].tensor->size(), 0.0);
        v_[i].assign(params_[i].tensor->size(), 0.0);
      }
    }
  }

  const std::vector<ParamRef>& params() const { return params_; }

  /// Apply accumulated gradients scaled by `grad_scale` and clear them.
  void step(double grad_scale) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i].tensor;
      if (!p.grad) continue;  // disconnected this step: nothing to apply
      std::vector<double>& g = *p.grad;
      if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t j = 0; j < g.size(); ++j) p.data[j] -= lr_ * grad_scale * g[j];
      } else {
        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double gj = grad_scale * g[j];
          m_[i][j] = 0.9 * m_[i][j] + 0.1 * gj;
          v_[i][j] = 0.999 * v_[i][j] + 0.001 * gj * gj;
          const double mhat = m_[i][j] / bc1;
          const double vhat = v_[i][j] / bc2;
          p.data[j] -= lr_ * (mhat / (std::sqrt(vhat) + 1e-8) + weight_decay_ * p.data[j]);
        }
      }
      p.clear_grad();
    }
  }

 private:
  std::vector<ParamRef> params_;
  OptimizerKind kind_;
  double lr_;
  double weight_decay_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ----- evaluation ----------------------------------------------------------------

/// Desk-scale quality axes: teacher-forced next-token accuracy overall, on
/// color tokens, on expert-attribute tokens (split by family), and on the
/// depth relation token; plus routing observables.
struct EvalMetrics {
  double lm = 0.0;
  double overall_acc = 0.0;
  double color_acc = 0.0;
  double expert_attr_acc = 0.0;
  double relation_acc = 0.0;
  std::array<double, 4> family_acc{};        // by Family
  std::array<double, 4> family_count{};
  double entropy = 0.0;                      // noise-free routing entropy
  std::vector<double> mean_weights;          // per expert, over all tokens
  std::array<double, 4> matched_weight{};    // mean weight of family-matched
                                             // expert over that family's cells
  std::array<double, 4> matched_cells{};
  std::size_t samples = 0;
};

/// Base-grid token indices covering a scene cell.
inline std::vector<std::size_t> cell_token_indices(const SceneCell& c, std::size_t grid) {
  const std::size_t per_side = grid / SynthSpec::kGridCells;
  std::vector<std::size_t> out;
  for (std::size_t dy = 0; dy < per_side; ++dy)
    for (std::size_t dx = 0; dx < per_side; ++dx)
      out.push_back((static_cast<std::size_t>(c.row) * per_side + dy) * grid +
                    static_cast<std::size_t>(c.col) * per_side + dx);
  return out;
}

inline EvalMetrics evaluate_model(ToveModel& m, const Dataset& data,
                                  const std::vector<int>& retained, TransferStrategy strategy) {
  EvalMetrics em;
  em.mean_weights.assign(m.expert_count(), 0.0);
  double token_rows = 0.0;
  double correct = 0, total = 0, color_ok = 0, color_n = 0, attr_ok = 0, attr_n = 0, rel_ok = 0,
         rel_n = 0;
  std::array<double, 4> fam_ok{};

  for (const PreparedSample& ps : data.samples) {
    Graph g;
    ForwardOptions opt;
    opt.mode = RunMode::Eval;
    opt.strategy = strategy;
    opt.retained = retained;
    opt.noise = false;
    ToveForward f = forward_tove(g, m, ps.rendered, ps.caption, opt);
    em.lm += f.breakdown.lm;

    LmAssembly a = assemble_lm(ps.caption);
    const Tensor& logits = g.value(f.logits);
    for (std::size_t pos = 0; pos < a.loss_targets.size(); ++pos) {
      const int target = a.loss_targets[pos];
      if (target == Vocab::kPad) continue;
      int best = 0;
      double bv = logits.at(pos, 0);
      for (std::size_t v = 1; v < logits.cols(); ++v)
        if (logits.at(pos, v) > bv) { bv = logits.at(pos, v); best = static_cast<int>(v); }
      const bool ok = best == target;
      total += 1; correct += ok;
      if (Vocab::is_color(target)) { color_n += 1; color_ok += ok; }
      const int fam = Vocab::family_of(target);
      if (fam >= 0) {
        attr_n += 1; attr_ok += ok;
        em.family_count[static_cast<std::size_t>(fam)] += 1;
        fam_ok[static_cast<std::size_t>(fam)] += ok;
      }
      if (Vocab::is_relation(target)) { rel_n += 1; rel_ok += ok; }
    }

    if (!retained.empty()) {
      const Tensor w = ensemble_weights_value(f.routing.scores, retained);
      em.entropy += routing_entropy(w) * static_cast<double>(w.rows());
      token_rows += static_cast<double>(w.rows());
      for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t k = 0; k < w.cols(); ++k) em.mean_weights[k] += w.at(i, k);
      for (const SceneCell& c : ps.scene.cells) {
        const std::size_t fam = static_cast<std::size_t>(c.family);
        if (fam >= m.expert_count()) continue;
        for (std::size_t tok : cell_token_indices(c, m.dims.grid)) {
          em.matched_weight[fam] += w.at(tok, fam);
          em.matched_cells[fam] += 1;
        }
      }
    }
    ++em.samples;
  }

  const double ns = static_cast<double>(em.samples ? em.samples : 1);
  em.lm /= ns;
  em.overall_acc = total ? correct / total : 0.0;
  em.color_acc = color_n ? color_ok / color_n : 0.0;
  em.expert_attr_acc = attr_n ? attr_ok / attr_n : 0.0;
  em.relation_acc = rel_n ? rel_ok / rel_n : 0.0;
  for (std::size_t f = 0; f < 4; ++f)
    em.family_acc[f] = em.family_count[f] ? fam_ok[f] / em.family_count[f] : 0.0;
  if (token_rows > 0) {
    em.entropy /= token_rows;
    for (double& v : em.mean_weights) v /= token_rows;
  }
  for (std::size_t f = 0; f < 4; ++f)
    if (em.matched_cells[f] > 0) em.matched_weight[f] /= em.matched_cells[f];
  return em;
}

/// Captioner-only evaluation against arbitrary vision tokens (used by the
/// knowledge-merged model, which runs without any expert machinery).
inline EvalMetrics evaluate_captioner(DecoderParams& dec, const ModelDims& dims,
                                      const std::function<Tensor(const RenderedSample&)>& tokens_fn,
                                      const Dataset& data) {
  EvalMetrics em;
  double correct = 0, total = 0, color_ok = 0, color_n = 0, attr_ok = 0, attr_n = 0, rel_ok = 0,
         rel_n = 0;
  std::array<double, 4> fam_ok{};
  for (const PreparedSample& ps : data.samples) {
    Graph g;
    Var vis = g.input(tokens_fn(ps.rendered));
    LmAssembly a = assemble_lm(ps.caption);
    Var logits = decode_teacher_forced(g, dec, dims, vis, a.inputs, false, false);
    em.lm += g.value(g.cross_entropy(logits, a.loss_targets, Vocab::kPad)).data[0];
    const Tensor& lt = g.value(logits);
    for (std::size_t pos = 0; pos < a.loss_targets.size(); ++pos) {
      const int target = a.loss_targets[pos];
      if (target == Vocab::kPad) continue;
      int best = 0;
      double bv = lt.at(pos, 0);
      for (std::size_t v = 1; v < lt.cols(); ++v)
        if (lt.at(pos, v) > bv) { bv = lt.at(pos, v); best = static_cast<int>(v); }
      const bool ok = best == target;
      total += 1; correct += ok;
      if (Vocab::is_color(target)) { color_n += 1; color_ok += ok; }
      const int fam = Vocab::family_of(target);
      if (fam >= 0) {
        attr_n += 1; attr_ok += ok;
        em.family_count[static_cast<std::size_t>(fam)] += 1;
        fam_ok[static_cast<std::size_t>(fam)] += ok;
      }
      if (Vocab::is_relation(target)) { rel_n += 1; rel_ok += ok; }
    }
    ++em.samples;
  }
  const double ns = static_cast<double>(em.samples ? em.samples : 1);
  em.lm /= ns;
  em.overall_acc = total ? correct / total : 0.0;
  em.color_acc = color_n ? color_ok / color_n : 0.0;
  em.expert_attr_acc = attr_n ? attr_ok / attr_n : 0.0;
  em.relation_acc = rel_n ? rel_ok / rel_n : 0.0;
  for (std::size_t f = 0; f < 4; ++f)
    em.family_acc[f] = em.family_count[f] ? fam_ok[f] / em.family_count[f] : 0.0;
  return em;
}

/// Greedy-decoded attribute accuracy: position-aligned match of generated
/// tokens against the reference caption, over expert-attribute positions.
inline double greedy_attribute_accuracy(ToveModel& m, const Dataset& data,
                                        const std::vector<int>& retained,
                                        TransferStrategy strategy) {
  double ok = 0, n = 0;
  for (const PreparedSample& ps : data.samples) {
    Graph g;
    ForwardOptions opt;
    opt.mode = RunMode::Eval;
    opt.strategy = strategy;
    opt.retained = retained;
    opt.noise = false;
    ToveForward f = forward_tove(g, m, ps.rendered, ps.caption, opt);
    const Tensor fused = g.value(f.fused_tokens);
    std::vector<int> gen = generate_greedy(m.decoder, m.dims, fused, ps.caption.prompt,
                                           m.dims.max_len);
    const std::vector<int>& ref = ps.rendered.caption;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (!Vocab::is_expert_attribute(ref[i])) continue;
      n += 1;
      if (i < gen.size() && gen[i] == ref[i]) ok += 1;
    }
  }
  return n ? ok / n : 0.0;
}

// ----- training loop ---------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  LossBreakdown mean;                 // averaged over the epoch's samples
  double entropy = 0.0;               // noise-free routing entropy (train set)
  std::vector<double> mean_weights;   // per-expert noise-free mean weight
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
};

/// Language-model pre-training / fine-tuning over one dataset. Pre-training
/// applies the cosine-relaxed balancing coefficient per epoch; fine-tuning
/// pins alpha to zero. Contribution statistics accumulate the ensemble
/// weights actually used.
inline TrainResult train_model(ToveModel& m, const RunConfig& cfg, const Dataset& train,
                               RunMode mode) {
  TOVE_CHECK(mode != RunMode::Eval, "train_model: mode must be a training mode");
  TOVE_CHECK(train.size() > 0, "train_model: empty dataset");
  Optimizer opt_state(trainable_parameters(m), cfg);
  RandomSource data_rng = RandomSource(cfg.seed).child(100);
  RandomSource noise_rng = RandomSource(cfg.seed).child(101);
  const std::vector<int> retained = cfg.retained_or_all();
  ScheduleConfig sched{cfg.alpha0, cfg.epochs};

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double alpha = (mode == RunMode::Pretrain) ? alpha_schedule(sched, epoch) : 0.0;
    data_rng.shuffle(order);

    EpochMetrics em;
    em.epoch = epoch;
    em.mean_weights.assign(m.expert_count(), 0.0);
    double token_rows = 0.0;
    LossBreakdown sum;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      for (std::size_t i = start; i < end; ++i) {
        const PreparedSample& ps = train.samples[order[i]];
        Graph g;
        ForwardOptions fo;
        fo.mode = mode;
        fo.strategy = cfg.transfer;
        fo.retained = retained;
        fo.noise = cfg.noise;
        fo.noise_rng = &noise_rng;
        fo.aux = cfg.aux;
        fo.alpha_t = alpha;
        ToveForward f = forward_tove(g, m, ps.rendered, ps.caption, fo);
        g.backward(f.total);
        m.contrib.update(f.routing.weights);

        sum.lm += f.breakdown.lm;
        sum.imp += f.breakdown.imp;
        sum.load += f.breakdown.load;
        sum.aux += f.breakdown.aux;
        sum.total += f.breakdown.total;
        const Tensor w = ensemble_weights_value(f.routing.scores, retained);
        em.entropy += routing_entropy(w) * static_cast<double>(w.rows());
        token_rows += static_cast<double>(w.rows());
        for (std::size_t r = 0; r < w.rows(); ++r)
          for (std::size_t k = 0; k < w.cols(); ++k) em.mean_weights[k] += w.at(r, k);
      }
      opt_state.step(1.0 / static_cast<double>(end - start));
    }

    const double ns = static_cast<double>(train.size());
    em.mean.lm = sum.lm / ns;
    em.mean.imp = sum.imp / ns;
    em.mean.load = sum.load / ns;
    em.mean.aux = sum.aux / ns;
    em.mean.alpha_t = alpha;
    em.mean.total = sum.total / ns;
    if (token_rows > 0) {
      em.entropy /= token_rows;
      for (double& v : em.mean_weights) v /= token_rows;
    }
    result.epochs.push_back(std::move(em));
  }
  return result;
}

// ----- model <-> checkpoint ------------------------------------------------------

inline ToveModel build_model(const RunConfig& cfg) {
  RandomSource rng(cfg.seed);
  ToveModel m = ToveModel::make(rng, cfg.dims, cfg.experts, cfg.lambda, cfg.gating_mlp);
  m.decoder.adaptors_enabled = cfg.adaptors;
  return m;
}

inline CheckpointData to_checkpoint(ToveModel& m, const RunConfig& cfg) {
  CheckpointData ck;
  ck.config_text = config_text(cfg);
  ck.hub_manifest = hub_manifest_text(m.hub.experts);
  m.visit([&](const std::string& name, Tensor& t) { ck.tensors.emplace_back(name, t); });
  Tensor mean({std::max<std::size_t>(1, m.contrib.mean.size())});
  for (std::size_t i = 0; i < m.contrib.mean.size(); ++i) mean.data[i] = m.contrib.mean[i];
  ck.tensors.emplace_back("contrib.mean", mean);
  ck.tensors.emplace_back("contrib.count", scalar(m.contrib.count));
  return ck;
}

/// Rebuild a full model from a checkpoint. Structure comes from the embedded
/// config; every tensor must match by name and shape, and the hub manifest
/// must agree with the freshly built hub.
inline std::pair<ToveModel, RunConfig> model_from_checkpoint(const CheckpointData& ck) {
  RunConfig cfg = parse_config_text(ck.config_text);
  TOVE_CHECK(!cfg.lite, "checkpoint holds a knowledge-merged model, not a full one");
  ToveModel m = build_model(cfg);
  if (hub_manifest_text(m.hub.experts) != ck.hub_manifest)
    throw io_error("checkpoint hub manifest does not match the configured hub");
  std::size_t used = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    const Tensor* src = ck.find(name);
    if (!src) throw io_error("checkpoint is missing tensor '" + name + "'");
    if (src->shape != t.shape) throw io_error("checkpoint tensor shape mismatch for '" + name + "'");
    t.data = src->data;
    ++used;
  });
  const Tensor* mean = ck.find("contrib.mean");
  const Tensor* count = ck.find("contrib.count");
  if (!mean || !count) throw io_error("checkpoint is missing contribution statistics");
  TOVE_CHECK(mean->size() >= m.expert_count(), "contribution stats arity mismatch");
  for (std::size_t i = 0; i < m.expert_count(); ++i) m.contrib.mean[i] = mean->data[i];
  m.contrib.count = count->data[0];
  if (used + 2 != ck.tensors.size()) throw io_error("checkpoint carries unexpected extra tensors");
  return {std::move(m), cfg};
}

inline std::uint64_t model_hash(ToveModel& m) {
  std::uint64_t h = 1469598103934665603ull;
  m.visit([&](const std::string&, Tensor& t) { h = tensor_hash(h, t); });
  return h;
}

}  // namespace tove
