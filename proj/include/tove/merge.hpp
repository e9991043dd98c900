// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "tove/train.hpp"

namespace tove {

/// Knowledge merging: a trainable clone of the frozen encoder learns to emit
/// the teacher's knowledge-transferred tokens directly, with the language
/// model kept in the loop, so deployment needs no expert inference at all.
///
/// The clone starts as an exact copy (clone tokens == teacher base tokens,
/// bit-identical) plus a zero-initialized patch-embedding extension over the
/// sample channels the base encoder is blind to. Only the clone updates;
/// every teacher component stays frozen, hash-checked across the session.
struct MergeSession {
  ToveModel teacher;
  RunConfig cfg;
  std::uint64_t teacher_hash = 0;
  VisionEncoderParams student;
  std::vector<double> gap_history;  // per-epoch mean gap, [0] = initial
};

struct MergeReport {
  double initial_gap = 0.0;
  double final_gap = 0.0;
  double lm_before = 0.0;
  double lm_after = 0.0;
  EvalMetrics teacher_eval;
  EvalMetrics student_eval;
  bool has_baseline = false;
  EvalMetrics baseline_eval;
};

inline MergeSession init_merge(const CheckpointData& teacher_ck) {
  auto [model, cfg] = model_from_checkpoint(teacher_ck);
  MergeSession s;
  s.teacher = std::move(model);
  s.cfg = cfg;
  s.teacher_hash = model_hash(s.teacher);
  s.student = s.teacher.encoder;  // exact copy
  s.student.frozen = false;
  s.student.add_extension(s.cfg.dims);
  return s;
}

/// Teacher's knowledge-transferred tokens, noise-free (stable target).
inline Tensor teacher_tokens(MergeSession& s, const PreparedSample& ps) {
  Graph g;
  ForwardOptions opt;
  opt.mode = RunMode::Eval;
  opt.strategy = s.cfg.transfer;
  opt.retained = s.cfg.retained_or_all();
  opt.noise = false;
  ToveForward f = forward_tove(g, s.teacher, ps.rendered, ps.caption, opt);
  return g.value(f.fused_tokens);
}

inline Tensor student_tokens(MergeSession& s, const RenderedSample& r) {
  Graph g;
  return g.value(encode_image(g, s.student, s.cfg.dims, r, /*force_frozen=*/true));
}

struct MergeStepResult {
  double lm = 0.0;
  double gap = 0.0;
  double total = 0.0;
};

/// One sample's merge objective:
///   lm_weight * ce(decoder(t_student), caption) + gap_weight * ||t~ - t_student||
/// Gradient reaches only the student encoder; the decoder and the full
/// teacher pipeline are frozen.
inline MergeStepResult merge_forward_backward(MergeSession& s, const PreparedSample& ps,
                                              double lm_weight, double gap_weight,
                                              bool with_grad) {
  Tensor target = teacher_tokens(s, ps);
  Graph g;
  Var t_student = encode_image(g, s.student, s.cfg.dims, ps.rendered);
  Var lm = lm_loss(g, s.teacher.decoder, s.cfg.dims, t_student, ps.caption, /*trainable=*/false,
                   /*adaptor_trainable=*/false);
  Var gap = g.gap_l2(t_student, g.input(target));
  Var total = g.add(g.scale(lm, lm_weight), g.scale(gap, gap_weight));
  if (with_grad) g.backward(total);
  MergeStepResult r;
  r.lm = g.value(lm).data[0];
  r.gap = g.value(gap).data[0];
  r.total = g.value(total).data[0];
  return r;
}

inline void merge_weights(MergeStrategy strategy, const RunConfig& cfg, double& lm_w, double& gap_w) {
  switch (strategy) {
    case MergeStrategy::L2: lm_w = 0.0; gap_w = cfg.merge_gap_weight; break;
    case MergeStrategy::Lm: lm_w = cfg.merge_lm_weight; gap_w = 0.0; break;
    case MergeStrategy::LmL2: lm_w = cfg.merge_lm_weight; gap_w = cfg.merge_gap_weight; break;
  }
}

inline std::vector<ParamRef> student_parameters(MergeSession& s) {
  std::vector<ParamRef> out;
  s.student.visit("student", [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

inline double mean_gap(MergeSession& s, const Dataset& data) {
  double total = 0.0;
  for (const PreparedSample& ps : data.samples) {
    Tensor target = teacher_tokens(s, ps);
    Tensor st = student_tokens(s, ps.rendered);
    Graph g;
    total += g.value(g.gap_l2(g.input(st), g.input(target))).data[0];
  }
  return data.size() ? total / static_cast<double>(data.size()) : 0.0;
}

inline double mean_student_lm(MergeSession& s, const Dataset& data) {
  double total = 0.0;
  for (const PreparedSample& ps : data.samples) {
    Graph g;
    Var t = encode_image(g, s.student, s.cfg.dims, ps.rendered, /*force_frozen=*/true);
    Var lm = lm_loss(g, s.teacher.decoder, s.cfg.dims, t, ps.caption, false, false);
    total += g.value(lm).data[0];
  }
  return data.size() ? total / static_cast<double>(data.size()) : 0.0;
}

/// Full merge run over the training split; gap history gets one entry up
/// front and one per epoch.
inline MergeReport run_merge(MergeSession& s, const Dataset& train, const Dataset& val,
                             const Dataset* gap_probe = nullptr) {
  double lm_w = 1.0, gap_w = 1.0;
  merge_weights(s.cfg.merge, s.cfg, lm_w, gap_w);
  const Dataset& probe = gap_probe ? *gap_probe : val;

  MergeReport report;
  report.initial_gap = mean_gap(s, probe);
  report.lm_before = mean_student_lm(s, probe);
  s.gap_history.push_back(report.initial_gap);

  RunConfig opt_cfg = s.cfg;
  opt_cfg.lr = s.cfg.merge_lr;
  Optimizer opt(student_parameters(s), opt_cfg);
  RandomSource data_rng = RandomSource(s.cfg.seed).child(200);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < s.cfg.merge_epochs; ++epoch) {
    data_rng.shuffle(order);
    double epoch_gap = 0.0;
    for (std::size_t start = 0; start < order.size(); start += s.cfg.batch) {
      const std::size_t end = std::min(order.size(), start + s.cfg.batch);
      for (std::size_t i = start; i < end; ++i) {
        MergeStepResult r = merge_forward_backward(s, train.samples[order[i]], lm_w, gap_w, true);
        epoch_gap += r.gap;
      }
      opt.step(1.0 / static_cast<double>(end - start));
    }
    s.gap_history.push_back(epoch_gap / static_cast<double>(train.size()));
  }

  report.final_gap = mean_gap(s, probe);
  report.lm_after = mean_student_lm(s, probe);
  report.teacher_eval = evaluate_model(s.teacher, val, s.cfg.retained_or_all(), s.cfg.transfer);
  report.student_eval = evaluate_captioner(
      s.teacher.decoder, s.cfg.dims, [&](const RenderedSample& r) { return student_tokens(s, r); },
      val);
  return report;
}

// ----- the exported, expert-free model -------------------------------------------

struct LiteModel {
  ModelDims dims;
  VisionEncoderParams encoder;
  DecoderParams decoder;
  RunConfig cfg;

  void visit(const ParamVisitor& fn) {
    encoder.visit("encoder", fn);
    decoder.visit("decoder", fn);
  }
};

/// Export the merged model: student encoder + frozen decoder, nothing else.
/// No projector, gating, fusion, or conv-encoder tensors are written.
inline void export_lite(MergeSession& s, const std::string& path) {
  TOVE_CHECK(!s.gap_history.empty(), "export_lite: merge session has not run");
  CheckpointData ck;
  RunConfig cfg = s.cfg;
  cfg.lite = true;
  ck.config_text = config_text(cfg);
  ck.hub_manifest = "";  // no experts travel with a lite model
  VisionEncoderParams student = s.student;
  student.visit("encoder", [&](const std::string& name, Tensor& t) { ck.tensors.emplace_back(name, t); });
  DecoderParams dec = s.teacher.decoder;
  dec.visit("decoder", [&](const std::string& name, Tensor& t) { ck.tensors.emplace_back(name, t); });
  save_checkpoint(ck, path);
}

inline LiteModel load_lite(const CheckpointData& ck) {
  RunConfig cfg = parse_config_text(ck.config_text);
  TOVE_CHECK(cfg.lite, "checkpoint does not hold a knowledge-merged model");
  LiteModel m;
  m.cfg = cfg;
  m.dims = cfg.dims;
  RandomSource rng(cfg.seed);
  ToveModel full = ToveModel::make(rng, cfg.dims, cfg.experts, cfg.lambda, cfg.gating_mlp);
  m.encoder = std::move(full.encoder);
  m.encoder.frozen = false;
  m.encoder.add_extension(cfg.dims);
  m.decoder = std::move(full.decoder);
  m.decoder.adaptors_enabled = cfg.adaptors;
  std::size_t used = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    const Tensor* src = ck.find(name);
    if (!src) throw io_error("lite checkpoint is missing tensor '" + name + "'");
    if (src->shape != t.shape) throw io_error("lite checkpoint shape mismatch for '" + name + "'");
    t.data = src->data;
    ++used;
  });
  if (used != ck.tensors.size()) throw io_error("lite checkpoint carries unexpected extra tensors");
  return m;
}

inline Tensor lite_tokens(LiteModel& m, const RenderedSample& r) {
  Graph g;
  return g.value(encode_image(g, m.encoder, m.dims, r, /*force_frozen=*/true));
}

inline EvalMetrics evaluate_lite(LiteModel& m, const Dataset& data) {
  return evaluate_captioner(m.decoder, m.dims,
                            [&](const RenderedSample& r) { return lite_tokens(m, r); }, data);
}

}  // namespace tove
