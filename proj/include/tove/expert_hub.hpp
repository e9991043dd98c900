// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "tove/graph.hpp"
#include "tove/nn.hpp"
#include "tove/synth.hpp"

namespace tove {

enum class ExpertKind : std::uint8_t { LowLevelMap = 0, Embedding = 1 };

struct ExpertSpec {
  int id = 0;
  std::string name;
  ExpertKind kind = ExpertKind::Embedding;
  std::size_t native_dim = 0;
  std::size_t grid_h = 0, grid_w = 0;
};

/// The desk-scale catalogue: two frozen embedding featurizers on a 6x6 grid
/// (deliberately off the base grid, so token alignment is exercised) and two
/// label-map experts encoded by trainable conv stacks.
inline std::vector<ExpertSpec> default_expert_catalogue(std::size_t count,
                                                        std::size_t base_grid = 8) {
  std::vector<ExpertSpec> all = {
      {0, "shape", ExpertKind::Embedding, 12, 6, 6},
      {1, "texture", ExpertKind::Embedding, 12, 6, 6},
      {2, "depth", ExpertKind::LowLevelMap, 8, base_grid, base_grid},
      {3, "edge", ExpertKind::LowLevelMap, 8, base_grid, base_grid},
  };
  TOVE_CHECK(count >= 1 && count <= all.size(), "expert count out of range");
  // A two-expert hub keeps one of each kind.
  if (count == 2) all = {all[0], all[2]};
  all.resize(count);
  for (std::size_t i = 0; i < all.size(); ++i) all[i].id = static_cast<int>(i);
  return all;
}

// ----- manifest -----------------------------------------------------------

inline std::string hub_manifest_text(const std::vector<ExpertSpec>& experts) {
  std::ostringstream os;
  for (const ExpertSpec& e : experts) {
    os << "id=" << e.id << " name=" << e.name << " kind="
       << (e.kind == ExpertKind::LowLevelMap ? "lowlevel" : "embedding") << " dk=" << e.native_dim
       << " grid=" << e.grid_h << "x" << e.grid_w << "\n";
  }
  return os.str();
}

inline std::vector<ExpertSpec> parse_hub_manifest(const std::string& text) {
  std::vector<ExpertSpec> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ExpertSpec e;
    std::istringstream ls(line);
    std::string kv;
    while (ls >> kv) {
      const auto eq = kv.find('=');
      TOVE_CHECK(eq != std::string::npos, "hub manifest: malformed entry '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "id") e.id = std::stoi(val);
      else if (key == "name") e.name = val;
      else if (key == "kind") {
        if (val == "lowlevel") e.kind = ExpertKind::LowLevelMap;
        else if (val == "embedding") e.kind = ExpertKind::Embedding;
        else throw validation_error("hub manifest: unknown kind '" + val + "'");
      } else if (key == "dk") e.native_dim = static_cast<std::size_t>(std::stoul(val));
      else if (key == "grid") {
        const auto x = val.find('x');
        TOVE_CHECK(x != std::string::npos, "hub manifest: malformed grid");
        e.grid_h = static_cast<std::size_t>(std::stoul(val.substr(0, x)));
        e.grid_w = static_cast<std::size_t>(std::stoul(val.substr(x + 1)));
      } else throw validation_error("hub manifest: unknown key '" + key + "'");
    }
    out.push_back(e);
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    TOVE_CHECK(out[i].id == static_cast<int>(i), "hub manifest: ids must be contiguous from 0");
  return out;
}

// ----- parameters -----------------------------------------------------------

/// Label-map patch encoder: two 3x3 convolutions with a GeLU between them,
/// strides chosen to land exactly on the expert's token grid.
struct ConvEncoderParams {
  Tensor w1, b1, w2, b2;
  std::size_t stride1 = 2, stride2 = 2;
  std::size_t mid = 8;

  static std::pair<std::size_t, std::size_t> stride_plan(std::size_t in_px, std::size_t out_tokens) {
    TOVE_CHECK(out_tokens >= 1 && in_px % out_tokens == 0, "conv encoder: grid must divide canvas");
    const std::size_t r = in_px / out_tokens;
    switch (r) {
      case 1: return {1, 1};
      case 2: return {2, 1};
      case 4: return {2, 2};
      case 8: return {4, 2};
      case 16: return {4, 4};
      default: throw validation_error("conv encoder: unsupported reduction factor");
    }
  }

  static ConvEncoderParams make(RandomSource& rng, std::size_t in_ch, std::size_t out_ch,
                                std::size_t in_px, std::size_t out_tokens) {
    ConvEncoderParams p;
    auto [s1, s2] = stride_plan(in_px, out_tokens);
    p.stride1 = s1;
    p.stride2 = s2;
    p.mid = out_ch;
    const double std1 = std::sqrt(2.0 / static_cast<double>(9 * in_ch));
    const double std2 = std::sqrt(1.0 / static_cast<double>(9 * p.mid));
    p.w1 = rng.gaussian_tensor({3, 3, in_ch, p.mid}, 0.0, std1);
    p.b1 = zeros({p.mid});
    p.w2 = rng.gaussian_tensor({3, 3, p.mid, out_ch}, 0.0, std2);
    p.b2 = zeros({out_ch});
    return p;
  }

  Var apply(Graph& g, Var label_map, bool trainable) {
    auto p = [&](Tensor& t) { return trainable ? g.param(t) : g.frozen(t); };
    Var h = g.gelu(g.conv2d(label_map, p(w1), p(b1), stride1, 1));
    return g.conv2d(h, p(w2), p(b2), stride2, 1);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

/// Expert token projectors: the first layer is expert-specific, the second is
/// shared across the hub, with a GeLU between them.
struct ProjectorParams {
  std::vector<LinearParams> psi1;  // one per expert, d_k -> d_h
  LinearParams psi2;               // shared, d_h -> d_lang

  static ProjectorParams make(RandomSource& rng, const std::vector<ExpertSpec>& experts,
                              std::size_t d_lang) {
    ProjectorParams p;
    const std::size_t d_h = d_lang;  // hidden width matches the shared space
    for (const ExpertSpec& e : experts)
      p.psi1.push_back(LinearParams::make(rng, e.native_dim, d_h, /*pre_gelu=*/true));
    p.psi2 = LinearParams::make(rng, d_h, d_lang);
    return p;
  }

  Var apply(Graph& g, std::size_t expert_id, Var native_tokens, bool trainable) {
    TOVE_CHECK(expert_id < psi1.size(), "unknown expert id in projector");
    TOVE_CHECK(g.value(native_tokens).cols() == psi1[expert_id].w.shape[0],
               "projector: token dim does not match expert");
    Var h = g.gelu(psi1[expert_id].apply(g, native_tokens, trainable));
    return psi2.apply(g, h, trainable);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    for (std::size_t k = 0; k < psi1.size(); ++k) psi1[k].visit(prefix + ".psi1." + std::to_string(k), fn);
    psi2.visit(prefix + ".psi2", fn);
  }
};

/// Process-wide expert-inference counter backing the "no expert code paths"
/// contract of exported models.
inline std::uint64_t& global_expert_infer_count() {
  static std::uint64_t count = 0;
  return count;
}

struct ExpertHub {
  std::vector<ExpertSpec> experts;
  std::vector<ConvEncoderParams> convs;  // indexed by expert id; unused slots empty
  ProjectorParams projectors;
  mutable std::uint64_t infer_count = 0;  // instrumentation for the no-expert contract

  std::size_t size() const { return experts.size(); }

  static ExpertHub make(RandomSource& rng, std::vector<ExpertSpec> specs, std::size_t d_lang) {
    ExpertHub h;
    h.experts = std::move(specs);
    h.convs.resize(h.experts.size());
    for (const ExpertSpec& e : h.experts) {
      if (e.kind == ExpertKind::LowLevelMap)
        h.convs[static_cast<std::size_t>(e.id)] =
            ConvEncoderParams::make(rng, 1, e.native_dim, SynthSpec::kCanvas, e.grid_h);
    }
    h.projectors = ProjectorParams::make(rng, h.experts, d_lang);
    return h;
  }

  /// The sample channel this expert reads. Embedding experts see attribute
  /// token grids; label-map experts see per-pixel maps.
  const Tensor& source_channel(const ExpertSpec& e, const RenderedSample& s) const {
    if (e.name == "shape") return s.shape_grid;
    if (e.name == "texture") return s.texture_grid;
    if (e.name == "depth") return s.depth_map;
    if (e.name == "edge") return s.edge_map;
    throw validation_error("sample lacks a source channel for expert '" + e.name + "'");
  }

  /// Native tokens of one expert for one sample: [grid_h*grid_w x d_k].
  /// Embedding experts are frozen featurizers; label maps go through the
  /// trainable conv encoder.
  Var infer(Graph& g, std::size_t expert_id, const RenderedSample& s, bool trainable) {
    TOVE_CHECK(expert_id < experts.size(), "unknown expert id");
    const ExpertSpec& e = experts[expert_id];
    ++infer_count;
    ++global_expert_infer_count();
    const Tensor& src = source_channel(e, s);
    if (e.kind == ExpertKind::Embedding) {
      TOVE_CHECK(src.rows() == e.grid_h * e.grid_w && src.cols() == e.native_dim,
                 "embedding expert channel shape mismatch");
      return g.input(src);
    }
    Var tokens = convs[expert_id].apply(g, g.input(src), trainable);
    const Tensor& t = g.value(tokens);
    TOVE_CHECK(t.shape[0] == e.grid_h && t.shape[1] == e.grid_w, "conv encoder missed the token grid");
    return g.reshape(tokens, {e.grid_h * e.grid_w, e.native_dim});
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    for (std::size_t k = 0; k < experts.size(); ++k)
      if (experts[k].kind == ExpertKind::LowLevelMap)
        convs[k].visit(prefix + ".conv." + std::to_string(k), fn);
    projectors.visit(prefix + ".proj", fn);
  }
};

/// Bilinear token-count alignment onto a target grid (value-level surface).
inline Tensor align_token_count(const Tensor& tokens, std::size_t hs, std::size_t ws,
                                std::size_t hd, std::size_t wd) {
  Graph g;
  return g.value(g.bilinear_resize(g.input(tokens), hs, ws, hd, wd));
}

}  // namespace tove
