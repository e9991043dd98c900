// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tove/error.hpp"
#include "tove/routing.hpp"
#include "tove/synth.hpp"
#include "tove/vlm.hpp"

namespace tove {

enum class OptimizerKind { Sgd, AdamW };
enum class MergeStrategy { L2, Lm, LmL2 };

/// One run, fully specified. Serialized as flat key=value text with sections;
/// checkpoints embed the serialized form for provenance.
struct RunConfig {
  // [model]
  ModelDims dims;
  std::size_t experts = 4;
  bool gating_mlp = false;
  bool adaptors = false;  // decoder adaptors present (finetuned checkpoints)
  bool lite = false;      // knowledge-merged export: encoder + decoder only

  // [train]
  std::uint64_t seed = 1;
  int epochs = 10;
  std::size_t batch = 8;
  double lr = 0.3;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double alpha0 = 0.01;
  double lambda = 0.1;
  TransferStrategy transfer = TransferStrategy::Residual;
  bool noise = true;
  bool aux = true;
  std::vector<int> retained;  // empty means "all"
  double weight_decay = 0.05;  // AdamW only

  // [data]
  std::size_t n_train = 2000;
  std::size_t n_val = 400;
  HoldoutRule holdout = HoldoutRule::NovelComposition;
  int holdout_pairs = 6;

  // [merge]
  MergeStrategy merge = MergeStrategy::LmL2;
  int merge_epochs = 10;
  double merge_lr = 0.05;
  double merge_lm_weight = 1.0;
  double merge_gap_weight = 1.0;

  std::vector<int> retained_or_all() const {
    return retained.empty() ? all_experts(experts) : retained;
  }

  void validate() const {
    TOVE_CHECK(lambda >= 0.0 && lambda <= 1.0, "config: lambda must lie in [0,1]");
    TOVE_CHECK(epochs >= 1, "config: epochs must be >= 1");
    TOVE_CHECK(merge_epochs >= 1, "config: merge_epochs must be >= 1");
    TOVE_CHECK(batch >= 1, "config: batch must be >= 1");
    TOVE_CHECK(experts >= 1 && experts <= 4, "config: experts must be 1..4");
    TOVE_CHECK(dims.vocab >= Vocab::kUsed || dims.vocab >= 8, "config: vocabulary too small");
    TOVE_CHECK(alpha0 >= 0.0, "config: alpha0 must be >= 0");
    for (int id : retained)
      TOVE_CHECK(id >= 0 && static_cast<std::size_t>(id) < experts, "config: retained id out of range");
  }
};

namespace cfgdetail {

inline std::string transfer_name(TransferStrategy s) {
  switch (s) {
    case TransferStrategy::Residual: return "residual";
    case TransferStrategy::Direct: return "direct";
    case TransferStrategy::Concat: return "concat";
  }
  return "residual";
}
inline TransferStrategy transfer_from(const std::string& s) {
  if (s == "residual") return TransferStrategy::Residual;
  if (s == "direct") return TransferStrategy::Direct;
  if (s == "concat") return TransferStrategy::Concat;
  throw validation_error("config: unknown transfer strategy '" + s + "'");
}
inline std::string merge_name(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::L2: return "l2";
    case MergeStrategy::Lm: return "lm";
    case MergeStrategy::LmL2: return "lm_l2";
  }
  return "lm_l2";
}
inline MergeStrategy merge_from(const std::string& s) {
  if (s == "l2") return MergeStrategy::L2;
  if (s == "lm") return MergeStrategy::Lm;
  if (s == "lm_l2") return MergeStrategy::LmL2;
  throw validation_error("config: unknown merge strategy '" + s + "'");
}
inline std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : "adamw";
}
inline OptimizerKind optimizer_from(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw validation_error("config: unknown optimizer '" + s + "'");
}
inline std::string retained_name(const std::vector<int>& v) {
  if (v.empty()) return "all";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}
inline std::vector<int> retained_from(const std::string& s) {
  if (s == "all") return {};
  if (s == "none") return {};
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}
inline bool bool_from(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw validation_error("config: expected boolean, got '" + s + "'");
}

}  // namespace cfgdetail

/// Canonical serialization: fixed key order so identical configs byte-match.
inline std::string config_text(const RunConfig& c) {
  std::ostringstream os;
  os << "[model]\n";
  os << "d_model = " << c.dims.d_model << "\n";
  os << "grid = " << c.dims.grid << "\n";
  os << "vocab = " << c.dims.vocab << "\n";
  os << "encoder_blocks = " << c.dims.enc_blocks << "\n";
  os << "decoder_blocks = " << c.dims.dec_blocks << "\n";
  os << "heads = " << c.dims.heads << "\n";
  os << "mlp_ratio = " << c.dims.mlp_ratio << "\n";
  os << "max_len = " << c.dims.max_len << "\n";
  os << "pos_embed = " << (c.dims.pos_embed ? "true" : "false") << "\n";
  os << "experts = " << c.experts << "\n";
  os << "gating_mlp = " << (c.gating_mlp ? "true" : "false") << "\n";
  os << "adaptors = " << (c.adaptors ? "true" : "false") << "\n";
  os << "lite = " << (c.lite ? "true" : "false") << "\n";
  os << "[train]\n";
  os << "seed = " << c.seed << "\n";
  os << "epochs = " << c.epochs << "\n";
  os << "batch = " << c.batch << "\n";
  os << "lr = " << c.lr << "\n";
  os << "optimizer = " << cfgdetail::optimizer_name(c.optimizer) << "\n";
  os << "weight_decay = " << c.weight_decay << "\n";
  os << "alpha0 = " << c.alpha0 << "\n";
  os << "lambda = " << c.lambda << "\n";
  os << "transfer = " << cfgdetail::transfer_name(c.transfer) << "\n";
  os << "noise = " << (c.noise ? "true" : "false") << "\n";
  os << "aux = " << (c.aux ? "true" : "false") << "\n";
  os << "retain = " << cfgdetail::retained_name(c.retained) << "\n";
  os << "[data]\n";
  os << "train = " << c.n_train << "\n";
  os << "val = " << c.n_val << "\n";
  os << "holdout = " << (c.holdout == HoldoutRule::NovelComposition ? "novel" : "none") << "\n";
  os << "holdout_pairs = " << c.holdout_pairs << "\n";
  os << "[merge]\n";
  os << "strategy = " << cfgdetail::merge_name(c.merge) << "\n";
  os << "epochs = " << c.merge_epochs << "\n";
  os << "lr = " << c.merge_lr << "\n";
  os << "lm_weight = " << c.merge_lm_weight << "\n";
  os << "gap_weight = " << c.merge_gap_weight << "\n";
  return os.str();
}

/// Flat key = value parser with [section] headers and # comments.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      TOVE_CHECK(line.back() == ']', "config: malformed section at line " + std::to_string(lineno));
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    TOVE_CHECK(eq != std::string::npos, "config: expected key = value at line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    try {
      if (full == "model.d_model") c.dims.d_model = std::stoul(val);
      else if (full == "model.grid") c.dims.grid = std::stoul(val);
      else if (full == "model.vocab") c.dims.vocab = std::stoul(val);
      else if (full == "model.encoder_blocks") c.dims.enc_blocks = std::stoul(val);
      else if (full == "model.decoder_blocks") c.dims.dec_blocks = std::stoul(val);
      else if (full == "model.heads") c.dims.heads = std::stoul(val);
      else if (full == "model.mlp_ratio") c.dims.mlp_ratio = std::stoul(val);
      else if (full == "model.max_len") c.dims.max_len = std::stoul(val);
      else if (full == "model.pos_embed") c.dims.pos_embed = cfgdetail::bool_from(val);
      else if (full == "model.experts") c.experts = std::stoul(val);
      else if (full == "model.gating_mlp") c.gating_mlp = cfgdetail::bool_from(val);
      else if (full == "model.adaptors") c.adaptors = cfgdetail::bool_from(val);
      else if (full == "model.lite") c.lite = cfgdetail::bool_from(val);
      else if (full == "train.seed") c.seed = std::stoull(val);
      else if (full == "train.epochs") c.epochs = std::stoi(val);
      else if (full == "train.batch") c.batch = std::stoul(val);
      else if (full == "train.lr") c.lr = std::stod(val);
      else if (full == "train.optimizer") c.optimizer = cfgdetail::optimizer_from(val);
      else if (full == "train.weight_decay") c.weight_decay = std::stod(val);
      else if (full == "train.alpha0") c.alpha0 = std::stod(val);
      else if (full == "train.lambda") c.lambda = std::stod(val);
      else if (full == "train.transfer") c.transfer = cfgdetail::transfer_from(val);
      else if (full == "train.noise") c.noise = cfgdetail::bool_from(val);
      else if (full == "train.aux") c.aux = cfgdetail::bool_from(val);
      else if (full == "train.retain") c.retained = cfgdetail::retained_from(val);
      else if (full == "data.train") c.n_train = std::stoul(val);
      else if (full == "data.val") c.n_val = std::stoul(val);
      else if (full == "data.holdout")
        c.holdout = (val == "novel") ? HoldoutRule::NovelComposition : HoldoutRule::None;
      else if (full == "data.holdout_pairs") c.holdout_pairs = std::stoi(val);
      else if (full == "merge.strategy") c.merge = cfgdetail::merge_from(val);
      else if (full == "merge.epochs") c.merge_epochs = std::stoi(val);
      else if (full == "merge.lr") c.merge_lr = std::stod(val);
      else if (full == "merge.lm_weight") c.merge_lm_weight = std::stod(val);
      else if (full == "merge.gap_weight") c.merge_gap_weight = std::stod(val);
      else throw validation_error("config: unknown key '" + full + "'");
    } catch (const std::invalid_argument&) {
      throw validation_error("config: bad value for '" + full + "': '" + val + "'");
    } catch (const std::out_of_range&) {
      throw validation_error("config: value out of range for '" + full + "'");
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open config: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config_text(os.str());
}

}  // namespace tove
