// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tove/expert_hub.hpp"
#include "tove/graph.hpp"
#include "tove/nn.hpp"
#include "tove/objectives.hpp"
#include "tove/routing.hpp"
#include "tove/synth.hpp"

namespace tove {

struct ModelDims {
  std::size_t d_model = 32;
  std::size_t grid = 8;        // base token grid per side; N = grid * grid
  std::size_t vocab = 64;
  std::size_t enc_blocks = 2;
  std::size_t dec_blocks = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t max_len = 16;
  bool pos_embed = true;

  std::size_t tokens() const { return grid * grid; }
  std::size_t patch_px() const {
    TOVE_CHECK(SynthSpec::kCanvas % grid == 0, "grid must divide the canvas");
    return SynthSpec::kCanvas / grid;
  }
  std::size_t patch_dim() const { return patch_px() * patch_px() * 3; }
  /// Extra per-patch features exposed to a knowledge-merged encoder: raw
  /// depth and edge map pixels plus resampled embedding-expert tokens.
  std::size_t extension_dim() const { return 2 * patch_px() * patch_px() + 2 * SynthSpec::kEmbedDim; }
};

// ----- vision encoder ---------------------------------------------------------

struct EncoderBlockParams {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  MlpParams mlp;

  static EncoderBlockParams make(RandomSource& rng, std::size_t d, std::size_t ratio) {
    EncoderBlockParams b;
    b.ln1 = LayerNormParams::make(d);
    b.ln2 = LayerNormParams::make(d);
    b.attn = AttentionParams::make(rng, d);
    b.mlp = MlpParams::make(rng, d, d * ratio, d);
    return b;
  }

  Var apply(Graph& g, Var x, std::size_t heads, bool trainable) {
    Var h = ln1.apply(g, x, trainable);
    x = g.add(x, attn.apply(g, h, h, heads, /*causal=*/false, trainable));
    x = g.add(x, mlp.apply(g, ln2.apply(g, x, trainable), trainable));
    return x;
  }

  void visit(const std::string& p, const ParamVisitor& fn) {
    ln1.visit(p + ".ln1", fn);
    attn.visit(p + ".attn", fn);
    ln2.visit(p + ".ln2", fn);
    mlp.visit(p + ".mlp", fn);
  }
};

/// Frozen toy stand-in for a pretrained image encoder: patch embedding,
/// learned positional table, pre-norm transformer blocks, final norm. It sees
/// the base (color) channels only. A knowledge-merged clone may additionally
/// carry a zero-initialized patch-embedding extension over the remaining
/// sample channels; at initialization that extension contributes exactly
/// nothing, so clone tokens start bit-identical to the original's.
struct VisionEncoderParams {
  LinearParams patch;
  Tensor pos;  // [N x d]
  std::vector<EncoderBlockParams> blocks;
  LayerNormParams ln_f;
  bool frozen = true;
  bool has_extension = false;
  LinearParams ext_patch;

  static VisionEncoderParams make(RandomSource& rng, const ModelDims& dims) {
    VisionEncoderParams e;
    e.patch = LinearParams::make(rng, dims.patch_dim(), dims.d_model);
    e.pos = dims.pos_embed ? rng.gaussian_tensor({dims.tokens(), dims.d_model}, 0.0, 0.02)
                           : zeros({dims.tokens(), dims.d_model});
    for (std::size_t i = 0; i < dims.enc_blocks; ++i)
      e.blocks.push_back(EncoderBlockParams::make(rng, dims.d_model, dims.mlp_ratio));
    e.ln_f = LayerNormParams::make(dims.d_model);
    return e;
  }

  void add_extension(const ModelDims& dims) {
    has_extension = true;
    ext_patch.w = zeros({dims.extension_dim(), dims.d_model});
    ext_patch.b = zeros({dims.d_model});
  }

  void visit(const std::string& p, const ParamVisitor& fn) {
    patch.visit(p + ".patch", fn);
    fn(p + ".pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), fn);
    ln_f.visit(p + ".ln_f", fn);
    if (has_extension) ext_patch.visit(p + ".ext", fn);
  }
};

/// Flatten the base canvas into per-patch pixel rows, raster order.
inline Tensor patchify(const Tensor& image, std::size_t grid) {
  TOVE_CHECK(image.rank() == 3 && image.shape[0] == SynthSpec::kCanvas &&
                 image.shape[1] == SynthSpec::kCanvas,
             "patchify: expected canvas-sized image");
  const std::size_t ch = image.shape[2];
  const std::size_t pp = SynthSpec::kCanvas / grid;
  Tensor out({grid * grid, pp * pp * ch});
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      const std::size_t tok = py * grid + px;
      std::size_t o = 0;
      for (std::size_t y = 0; y < pp; ++y)
        for (std::size_t x = 0; x < pp; ++x)
          for (std::size_t c = 0; c < ch; ++c)
            out.data[tok * out.cols() + o++] =
                image.data[((py * pp + y) * SynthSpec::kCanvas + (px * pp + x)) * ch + c];
    }
  return out;
}

/// Per-patch features of every non-base channel, for the merged encoder:
/// [depth pixels | edge pixels | shape token | texture token] per patch.
inline Tensor extension_patches(const RenderedSample& s, const ModelDims& dims) {
  const std::size_t grid = dims.grid, pp = dims.patch_px();
  Tensor depth = patchify(s.depth_map, grid);
  Tensor edge = patchify(s.edge_map, grid);
  Tensor shp = align_token_count(s.shape_grid, SynthSpec::kEmbedGrid, SynthSpec::kEmbedGrid, grid, grid);
  Tensor tex = align_token_count(s.texture_grid, SynthSpec::kEmbedGrid, SynthSpec::kEmbedGrid, grid, grid);
  const std::size_t n = grid * grid, d = dims.extension_dim();
  Tensor out({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < pp * pp; ++i) out.data[t * d + o++] = depth.data[t * pp * pp + i];
    for (std::size_t i = 0; i < pp * pp; ++i) out.data[t * d + o++] = edge.data[t * pp * pp + i];
    for (std::size_t i = 0; i < SynthSpec::kEmbedDim; ++i) out.data[t * d + o++] = shp.data[t * SynthSpec::kEmbedDim + i];
    for (std::size_t i = 0; i < SynthSpec::kEmbedDim; ++i) out.data[t * d + o++] = tex.data[t * SynthSpec::kEmbedDim + i];
  }
  return out;
}

/// t_vis: deterministic tokens for a sample. Trainability follows the frozen
/// flag unless the caller forces evaluation.
inline Var encode_image(Graph& g, VisionEncoderParams& enc, const ModelDims& dims,
                        const RenderedSample& sample, bool force_frozen = false) {
  const bool trainable = !enc.frozen && !force_frozen;
  Var x = enc.patch.apply(g, g.input(patchify(sample.base, dims.grid)), trainable);
  if (enc.has_extension)
    x = g.add(x, enc.ext_patch.apply(g, g.input(extension_patches(sample, dims)), trainable));
  if (dims.pos_embed) x = g.add(x, trainable ? g.param(enc.pos) : g.frozen(enc.pos));
  for (EncoderBlockParams& b : enc.blocks) x = b.apply(g, x, dims.heads, trainable);
  return enc.ln_f.apply(g, x, trainable);
}

// ----- language decoder ---------------------------------------------------------

struct DecoderBlockParams {
  LayerNormParams ln1, ln2, ln3;
  AttentionParams self_attn, cross_attn;
  MlpParams mlp;
  MlpParams adaptor;  // bottleneck width d/4, zero-initialized output
  bool has_adaptor = false;

  static DecoderBlockParams make(RandomSource& rng, std::size_t d, std::size_t ratio) {
    DecoderBlockParams b;
    b.ln1 = LayerNormParams::make(d);
    b.ln2 = LayerNormParams::make(d);
    b.ln3 = LayerNormParams::make(d);
    b.self_attn = AttentionParams::make(rng, d);
    b.cross_attn = AttentionParams::make(rng, d);
    b.mlp = MlpParams::make(rng, d, d * ratio, d);
    b.adaptor = MlpParams::make(rng, d, std::max<std::size_t>(1, d / 4), d, /*zero_out=*/true);
    return b;
  }

  Var apply(Graph& g, Var x, Var vis, std::size_t heads, bool trainable, bool use_adaptor,
            bool adaptor_trainable) {
    Var h = ln1.apply(g, x, trainable);
    x = g.add(x, self_attn.apply(g, h, h, heads, /*causal=*/true, trainable));
    Var q = ln2.apply(g, x, trainable);
    x = g.add(x, cross_attn.apply(g, q, vis, heads, /*causal=*/false, trainable));
    x = g.add(x, mlp.apply(g, ln3.apply(g, x, trainable), trainable));
    if (use_adaptor) x = g.add(x, adaptor.apply(g, x, adaptor_trainable));
    return x;
  }

  void visit(const std::string& p, const ParamVisitor& fn, bool with_adaptor) {
    ln1.visit(p + ".ln1", fn);
    self_attn.visit(p + ".self", fn);
    ln2.visit(p + ".ln2", fn);
    cross_attn.visit(p + ".cross", fn);
    ln3.visit(p + ".ln3", fn);
    mlp.visit(p + ".mlp", fn);
    if (with_adaptor) adaptor.visit(p + ".adaptor", fn);
  }
};

struct DecoderParams {
  Tensor tok_emb;  // [V x d]
  Tensor pos_emb;  // [max_len x d]
  std::vector<DecoderBlockParams> blocks;
  LayerNormParams ln_f;
  LinearParams out;
  bool adaptors_enabled = false;

  static DecoderParams make(RandomSource& rng, const ModelDims& dims) {
    DecoderParams d;
    d.tok_emb = rng.gaussian_tensor({dims.vocab, dims.d_model}, 0.0, 0.02);
    d.pos_emb = rng.gaussian_tensor({dims.max_len, dims.d_model}, 0.0, 0.02);
    for (std::size_t i = 0; i < dims.dec_blocks; ++i)
      d.blocks.push_back(DecoderBlockParams::make(rng, dims.d_model, dims.mlp_ratio));
    d.ln_f = LayerNormParams::make(dims.d_model);
    d.out = LinearParams::make(rng, dims.d_model, dims.vocab);
    return d;
  }

  void visit(const std::string& p, const ParamVisitor& fn) {
    fn(p + ".tok_emb", tok_emb);
    fn(p + ".pos_emb", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(p + ".block" + std::to_string(i), fn, adaptors_enabled);
    ln_f.visit(p + ".ln_f", fn);
    out.visit(p + ".out", fn);
  }
};

// ----- captions ------------------------------------------------------------------

struct TokenizedCaption {
  std::vector<int> prompt;   // [BOS, <describe>]
  std::vector<int> targets;  // caption tokens + EOS
  int vocab = 64;

  static TokenizedCaption make(const std::vector<int>& caption_ids, int vocab) {
    TokenizedCaption t;
    t.vocab = vocab;
    t.prompt = {Vocab::kBos, Vocab::kTask};
    t.targets = caption_ids;
    t.targets.push_back(Vocab::kEos);
    for (int id : t.targets) TOVE_CHECK(id >= 0 && id < vocab, "caption token exceeds vocabulary");
    return t;
  }
};

/// Causal teacher-forced logits [L x V] for inputs = prompt ++ caption; the
/// aligned targets ignore intra-prompt positions.
inline Var decode_teacher_forced(Graph& g, DecoderParams& dec, const ModelDims& dims, Var vis_tokens,
                                 const std::vector<int>& inputs, bool trainable,
                                 bool adaptor_trainable) {
  TOVE_CHECK(!inputs.empty(), "decoder inputs must be nonempty");
  TOVE_CHECK(inputs.size() <= dims.max_len, "sequence exceeds decoder maximum length");
  for (int id : inputs)
    TOVE_CHECK(id >= 0 && static_cast<std::size_t>(id) < dims.vocab, "token id exceeds vocabulary");
  std::vector<int> pos_ids(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) pos_ids[i] = static_cast<int>(i);
  Var te = trainable ? g.param(dec.tok_emb) : g.frozen(dec.tok_emb);
  Var pe = trainable ? g.param(dec.pos_emb) : g.frozen(dec.pos_emb);
  Var x = g.add(g.rows_lookup(te, inputs), g.rows_lookup(pe, pos_ids));
  for (DecoderBlockParams& b : dec.blocks)
    x = b.apply(g, x, vis_tokens, dims.heads, trainable, dec.adaptors_enabled, adaptor_trainable);
  x = dec.ln_f.apply(g, x, trainable);
  return dec.out.apply(g, x, trainable);
}

/// Language-modeling loss pieces for one sample.
struct LmAssembly {
  std::vector<int> inputs;       // prompt ++ caption
  std::vector<int> loss_targets; // next-token targets, PAD where ignored
};

inline LmAssembly assemble_lm(const TokenizedCaption& cap) {
  TOVE_CHECK(cap.targets.size() > 1, "caption has no supervisable positions");  // > EOS alone
  LmAssembly a;
  a.inputs = cap.prompt;
  a.inputs.insert(a.inputs.end(), cap.targets.begin(), cap.targets.end() - 1);
  // position i predicts sequence[i+1]; predictions inside the prompt are ignored
  std::vector<int> seq = cap.prompt;
  seq.insert(seq.end(), cap.targets.begin(), cap.targets.end());
  a.loss_targets.assign(a.inputs.size(), Vocab::kPad);
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    const bool in_prompt = (i + 1 < cap.prompt.size());
    a.loss_targets[i] = in_prompt ? Vocab::kPad : seq[i + 1];
  }
  return a;
}

/// Teacher-forced cross-entropy over caption positions, prompt ignored.
inline Var lm_loss(Graph& g, DecoderParams& dec, const ModelDims& dims, Var vis_tokens,
                   const TokenizedCaption& cap, bool trainable, bool adaptor_trainable) {
  LmAssembly a = assemble_lm(cap);
  Var logits = decode_teacher_forced(g, dec, dims, vis_tokens, a.inputs, trainable, adaptor_trainable);
  return g.cross_entropy(logits, a.loss_targets, Vocab::kPad);
}

/// Greedy decoding until EOS or max_len; the returned ids exclude the prompt
/// and the terminating EOS.
inline std::vector<int> generate_greedy(DecoderParams& dec, const ModelDims& dims,
                                        const Tensor& vis_tokens, const std::vector<int>& prompt,
                                        std::size_t max_len) {
  TOVE_CHECK(max_len >= 1, "max_len must be positive");
  std::vector<int> seq = prompt;
  std::vector<int> out;
  while (seq.size() < dims.max_len && out.size() < max_len) {
    Graph g;
    Var vis = g.input(vis_tokens);
    Var logits = decode_teacher_forced(g, dec, dims, vis, seq, false, false);
    const Tensor& lt = g.value(logits);
    const std::size_t last = lt.rows() - 1;
    int best = 0;
    double bv = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lt.cols(); ++c)
      if (lt.at(last, c) > bv) { bv = lt.at(last, c); best = static_cast<int>(c); }
    if (best == Vocab::kEos) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

// ----- the assembled model ---------------------------------------------------------

enum class RunMode { Pretrain, Finetune, Eval };

struct ToveModel {
  ModelDims dims;
  VisionEncoderParams encoder;
  ExpertHub hub;
  GatingParams gating;
  FusionParams fusion;
  DecoderParams decoder;
  ContributionStats contrib;

  static ToveModel make(RandomSource& rng, const ModelDims& dims, std::size_t experts,
                        double lambda, bool gating_mlp = false) {
    ToveModel m;
    m.dims = dims;
    RandomSource enc_rng = rng.child(1), hub_rng = rng.child(2), gate_rng = rng.child(3),
                 fuse_rng = rng.child(4), dec_rng = rng.child(5);
    m.encoder = VisionEncoderParams::make(enc_rng, dims);
    m.hub = ExpertHub::make(hub_rng, default_expert_catalogue(experts, dims.grid), dims.d_model);
    m.gating = GatingParams::make(gate_rng, dims.d_model, experts, gating_mlp);
    m.fusion = FusionParams::make(fuse_rng, dims.d_model, lambda);
    m.decoder = DecoderParams::make(dec_rng, dims);
    m.contrib = ContributionStats::make(experts);
    return m;
  }

  std::size_t expert_count() const { return hub.size(); }

  void visit(const ParamVisitor& fn) {
    encoder.visit("encoder", fn);
    hub.visit("hub", fn);
    gating.visit("gating", fn);
    fusion.visit("fusion", fn);
    decoder.visit("decoder", fn);
  }
};

struct ForwardOptions {
  RunMode mode = RunMode::Pretrain;
  TransferStrategy strategy = TransferStrategy::Residual;
  std::vector<int> retained;        // expert ids; may be empty (no experts at all)
  bool noise = true;                // exploration noise on routing scores (training only)
  RandomSource* noise_rng = nullptr;
  bool aux = true;                  // balancing losses (pretraining only)
  double alpha_t = 0.0;
};

struct ToveForward {
  Var total;
  LossBreakdown breakdown;
  RoutingState routing;
  Var fused_tokens;
  Var base_tokens;
  Var logits;  // teacher-forced [L x V]
};

/// The end-to-end pipeline: encode, infer/align/project retained experts,
/// route, ensemble, fuse, decode, and assemble the objective.
inline ToveForward forward_tove(Graph& g, ToveModel& m, const RenderedSample& sample,
                                const TokenizedCaption& cap, const ForwardOptions& opt) {
  const bool training = opt.mode != RunMode::Eval;
  const bool adaptors = m.decoder.adaptors_enabled;
  const std::size_t K = m.expert_count();
  const std::size_t n = m.dims.tokens();

  ToveForward out;
  out.routing.retained = opt.retained;
  out.routing.noise_enabled = training && opt.noise;
  out.base_tokens = encode_image(g, m.encoder, m.dims, sample);

  Var t_exp;
  Var scores;
  if (opt.retained.empty()) {
    // Sweep end point: every expert detached. No routing happens; expert
    // knowledge is identically zero (flagged in reports, kept for the
    // collapse observation).
    t_exp = g.input(zeros({n, m.dims.d_model}));
    out.routing.scores = zeros({n, K});
    out.routing.weights = zeros({n, K});
  } else {
    scores = m.gating.route(g, out.base_tokens, training);
    RandomSource* nrng = (training && opt.noise) ? opt.noise_rng : nullptr;
    if (training && opt.noise) TOVE_CHECK(nrng, "noise enabled but no noise rng supplied");
    Var weights = ensemble_weights(g, scores, nrng, opt.retained);
    std::vector<Var> projected(K);
    std::vector<bool> keep(K, false);
    for (int id : opt.retained) keep[static_cast<std::size_t>(id)] = true;
    for (std::size_t k = 0; k < K; ++k) {
      if (!keep[k]) {  // detached experts are skipped outright
        projected[k] = g.input(zeros({n, m.dims.d_model}));
        continue;
      }
      Var native = m.hub.infer(g, k, sample, training);
      const ExpertSpec& e = m.hub.experts[k];
      Var aligned = g.bilinear_resize(native, e.grid_h, e.grid_w, m.dims.grid, m.dims.grid);
      projected[k] = m.hub.projectors.apply(g, k, aligned, training);
    }
    t_exp = ensemble_expert_tokens(g, weights, projected);
    out.routing.scores = g.value(scores);
    out.routing.weights = g.value(weights);
  }

  Var fused;
  switch (opt.strategy) {
    case TransferStrategy::Residual: fused = fuse_residual(g, m.fusion, out.base_tokens, t_exp, training); break;
    case TransferStrategy::Direct: fused = fuse_direct(g, out.base_tokens, t_exp); break;
    case TransferStrategy::Concat: fused = fuse_concat(g, out.base_tokens, t_exp); break;
  }
  out.fused_tokens = fused;
  LmAssembly a = assemble_lm(cap);
  out.logits = decode_teacher_forced(g, m.decoder, m.dims, fused, a.inputs, training,
                                     adaptors && training);
  Var lm = g.cross_entropy(out.logits, a.loss_targets, Vocab::kPad);

  const bool want_aux =
      training && opt.mode == RunMode::Pretrain && opt.aux && opt.alpha_t != 0.0 && scores.valid();
  if (want_aux) {
    // Balancing terms: importance over noise-free weights, load over raw scores.
    Var clean = ensemble_weights(g, scores, nullptr, opt.retained);
    Var imp = importance_loss(g, clean);
    Var load = load_loss(g, scores, 1.0 / static_cast<double>(K));
    Var aux = g.scale(g.add(imp, load), 0.5);
    out.total = g.add(lm, g.scale(aux, opt.alpha_t));
    out.breakdown = pretrain_loss(g.value(lm).data[0], g.value(imp).data[0], g.value(load).data[0],
                                  opt.alpha_t);
  } else {
    out.total = lm;
    out.breakdown = pretrain_loss(g.value(lm).data[0], 0.0, 0.0, 0.0);
  }
  return out;
}

}  // namespace tove
