// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "tove/merge.hpp"
#include "tove/train.hpp"

namespace tove {

namespace fs = std::filesystem;

inline std::string fmt_g17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw io_error("write failed: " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open: " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Startup check of an external hub manifest against the built hub.
inline void check_hub_manifest(const ToveModel& m, const std::string& hub_path) {
  if (hub_path.empty()) return;
  const std::string text = read_text_file(hub_path);
  const auto parsed = parse_hub_manifest(text);
  if (hub_manifest_text(parsed) != hub_manifest_text(m.hub.experts))
    throw validation_error("hub manifest file disagrees with the checkpoint's hub");
}

// ----- metrics CSV -----------------------------------------------------------

inline std::string metrics_csv(const TrainResult& result, std::size_t experts) {
  std::ostringstream os;
  os << "epoch,lm,imp,load,aux,alpha_t,total,routing_entropy";
  for (std::size_t k = 0; k < experts; ++k) os << ",w_mean_" << k;
  os << "\n";
  for (const EpochMetrics& em : result.epochs) {
    os << em.epoch << "," << fmt_g17(em.mean.lm) << "," << fmt_g17(em.mean.imp) << ","
       << fmt_g17(em.mean.load) << "," << fmt_g17(em.mean.aux) << "," << fmt_g17(em.mean.alpha_t)
       << "," << fmt_g17(em.mean.total) << "," << fmt_g17(em.entropy);
    for (double w : em.mean_weights) os << "," << fmt_g17(w);
    os << "\n";
  }
  return os.str();
}

inline std::string eval_csv_header() {
  return "lm,overall_acc,color_acc,expert_attr_acc,relation_acc,shape_acc,texture_acc,depth_acc,"
         "edge_acc,entropy,matched_w_shape,matched_w_texture,matched_w_depth,matched_w_edge,"
         "w_mean_0,w_mean_1,w_mean_2,w_mean_3";
}

inline std::string eval_csv_row(const EvalMetrics& em) {
  std::ostringstream os;
  os << fmt_g17(em.lm) << "," << fmt_g17(em.overall_acc) << "," << fmt_g17(em.color_acc) << ","
     << fmt_g17(em.expert_attr_acc) << "," << fmt_g17(em.relation_acc);
  for (std::size_t f = 0; f < 4; ++f) os << "," << fmt_g17(em.family_acc[f]);
  os << "," << fmt_g17(em.entropy);
  for (std::size_t f = 0; f < 4; ++f) os << "," << fmt_g17(em.matched_weight[f]);
  for (std::size_t k = 0; k < 4; ++k)
    os << "," << (k < em.mean_weights.size() ? fmt_g17(em.mean_weights[k]) : "0");
  return os.str();
}

// ----- commands ----------------------------------------------------------------

/// gen-data: deterministic dataset files plus the hub manifest.
inline void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  RandomSource rng(cfg.seed);
  DatasetSplits splits = make_splits(rng, cfg.n_train, cfg.n_val, cfg.holdout, cfg.holdout_pairs);

  DatasetFile train;
  train.split = "train";
  train.seed = cfg.seed;
  train.vocab = static_cast<int>(cfg.dims.vocab);
  train.holdout_pairs = splits.holdout_pairs;
  train.scenes = std::move(splits.train);
  save_dataset(train, (fs::path(out_dir) / "train.tds").string());

  DatasetFile val = train;
  val.split = "val";
  val.scenes = std::move(splits.val);
  save_dataset(val, (fs::path(out_dir) / "val.tds").string());

  write_text_file(fs::path(out_dir) / "hub.txt",
                  hub_manifest_text(default_expert_catalogue(cfg.experts, cfg.dims.grid)));
  write_text_file(fs::path(out_dir) / "config.ini", config_text(cfg));
}

struct LoadedData {
  Dataset train, val;
};

inline LoadedData load_data_dir(const std::string& data_dir, std::size_t vocab) {
  LoadedData d;
  d.train = prepare_dataset(load_dataset((fs::path(data_dir) / "train.tds").string()).scenes, vocab);
  d.val = prepare_dataset(load_dataset((fs::path(data_dir) / "val.tds").string()).scenes, vocab);
  return d;
}

/// pretrain: train from scratch under the full objective; write checkpoint,
/// per-epoch metrics, and the hub manifest.
inline void cmd_pretrain(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  LoadedData data = load_data_dir(data_dir, cfg.dims.vocab);
  ToveModel model = build_model(cfg);
  TrainResult result = train_model(model, cfg, data.train, RunMode::Pretrain);
  save_checkpoint(to_checkpoint(model, cfg), (fs::path(out_dir) / "checkpoint.ck").string());
  write_text_file(fs::path(out_dir) / "metrics.csv", metrics_csv(result, model.expert_count()));
  write_text_file(fs::path(out_dir) / "hub.txt", hub_manifest_text(model.hub.experts));
  EvalMetrics em = evaluate_model(model, data.val, cfg.retained_or_all(), cfg.transfer);
  write_text_file(fs::path(out_dir) / "eval.csv", eval_csv_header() + "\n" + eval_csv_row(em) + "\n");
}

/// finetune: continue from a checkpoint with adaptors enabled and the
/// balancing loss off.
inline void cmd_finetune(const RunConfig& overrides, const std::string& checkpoint_path,
                         const std::string& data_dir, const std::string& out_dir,
                         const std::string& hub_path = "") {
  fs::create_directories(out_dir);
  auto [model, cfg] = model_from_checkpoint(load_checkpoint(checkpoint_path));
  check_hub_manifest(model, hub_path);
  cfg.seed = overrides.seed;
  cfg.epochs = overrides.epochs;
  cfg.lr = overrides.lr;
  cfg.optimizer = overrides.optimizer;
  cfg.batch = overrides.batch;
  cfg.noise = overrides.noise;
  cfg.adaptors = true;
  cfg.aux = false;
  model.decoder.adaptors_enabled = true;
  LoadedData data = load_data_dir(data_dir, cfg.dims.vocab);
  TrainResult result = train_model(model, cfg, data.train, RunMode::Finetune);
  save_checkpoint(to_checkpoint(model, cfg), (fs::path(out_dir) / "checkpoint.ck").string());
  write_text_file(fs::path(out_dir) / "metrics.csv", metrics_csv(result, model.expert_count()));
  write_text_file(fs::path(out_dir) / "hub.txt", hub_manifest_text(model.hub.experts));
  EvalMetrics em = evaluate_model(model, data.val, cfg.retained_or_all(), cfg.transfer);
  write_text_file(fs::path(out_dir) / "eval.csv", eval_csv_header() + "\n" + eval_csv_row(em) + "\n");
}

/// merge: distill the expert-enhanced tokens into an encoder clone, export
/// the expert-free model, and report the gap trajectory.
inline MergeReport cmd_merge(const RunConfig& overrides, const std::string& checkpoint_path,
                             const std::string& data_dir, const std::string& out_dir,
                             const std::string& baseline_checkpoint = "") {
  fs::create_directories(out_dir);
  MergeSession session = init_merge(load_checkpoint(checkpoint_path));
  session.cfg.merge = overrides.merge;
  session.cfg.merge_epochs = overrides.merge_epochs;
  session.cfg.merge_lr = overrides.merge_lr;
  session.cfg.merge_lm_weight = overrides.merge_lm_weight;
  session.cfg.merge_gap_weight = overrides.merge_gap_weight;
  session.cfg.batch = overrides.batch;
  LoadedData data = load_data_dir(data_dir, session.cfg.dims.vocab);

  const std::uint64_t hash_before = model_hash(session.teacher);
  MergeReport report = run_merge(session, data.train, data.val, &data.train);
  TOVE_CHECK(model_hash(session.teacher) == hash_before, "teacher parameters changed during merge");

  if (!baseline_checkpoint.empty()) {
    auto [baseline, bcfg] = model_from_checkpoint(load_checkpoint(baseline_checkpoint));
    report.baseline_eval = evaluate_model(baseline, data.val, bcfg.retained_or_all(), bcfg.transfer);
    report.has_baseline = true;
  }

  export_lite(session, (fs::path(out_dir) / "lite.ck").string());

  std::ostringstream gaps;
  gaps << "epoch,mean_gap\n";
  for (std::size_t i = 0; i < session.gap_history.size(); ++i)
    gaps << i << "," << fmt_g17(session.gap_history[i]) << "\n";
  write_text_file(fs::path(out_dir) / "gap_history.csv", gaps.str());

  std::ostringstream rep;
  rep << "strategy," << cfgdetail::merge_name(session.cfg.merge) << "\n";
  rep << "initial_gap," << fmt_g17(report.initial_gap) << "\n";
  rep << "final_gap," << fmt_g17(report.final_gap) << "\n";
  rep << "lm_before," << fmt_g17(report.lm_before) << "\n";
  rep << "lm_after," << fmt_g17(report.lm_after) << "\n";
  rep << "teacher_expert_attr_acc," << fmt_g17(report.teacher_eval.expert_attr_acc) << "\n";
  rep << "student_expert_attr_acc," << fmt_g17(report.student_eval.expert_attr_acc) << "\n";
  rep << "teacher_overall_acc," << fmt_g17(report.teacher_eval.overall_acc) << "\n";
  rep << "student_overall_acc," << fmt_g17(report.student_eval.overall_acc) << "\n";
  if (report.has_baseline) {
    rep << "baseline_expert_attr_acc," << fmt_g17(report.baseline_eval.expert_attr_acc) << "\n";
    rep << "baseline_overall_acc," << fmt_g17(report.baseline_eval.overall_acc) << "\n";
  }
  write_text_file(fs::path(out_dir) / "merge_report.csv", rep.str());

  std::ostringstream human;
  human << "knowledge merging (" << cfgdetail::merge_name(session.cfg.merge) << ")\n"
        << "  mean gap:   " << report.initial_gap << " -> " << report.final_gap << "\n"
        << "  student lm: " << report.lm_before << " -> " << report.lm_after << "\n"
        << "  expert-attribute accuracy: teacher " << report.teacher_eval.expert_attr_acc
        << ", student " << report.student_eval.expert_attr_acc;
  if (report.has_baseline) human << ", baseline " << report.baseline_eval.expert_attr_acc;
  human << "\n";
  write_text_file(fs::path(out_dir) / "merge_report.txt", human.str());
  return report;
}

/// eval: metrics for a full or lite checkpoint on the validation split.
inline EvalMetrics cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
                            const std::string& out_dir = "",
                            const std::vector<int>* retain_override = nullptr,
                            const std::string& hub_path = "") {
  CheckpointData ck = load_checkpoint(checkpoint_path);
  RunConfig probe = parse_config_text(ck.config_text);
  EvalMetrics em;
  if (probe.lite) {
    LiteModel lite = load_lite(ck);
    Dataset val = prepare_dataset(
        load_dataset((fs::path(data_dir) / "val.tds").string()).scenes, lite.dims.vocab);
    em = evaluate_lite(lite, val);
  } else {
    auto [model, cfg] = model_from_checkpoint(ck);
    check_hub_manifest(model, hub_path);
    Dataset val = prepare_dataset(
        load_dataset((fs::path(data_dir) / "val.tds").string()).scenes, cfg.dims.vocab);
    em = evaluate_model(model, val, retain_override ? *retain_override : cfg.retained_or_all(),
                        cfg.transfer);
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text_file(fs::path(out_dir) / "eval.csv",
                    eval_csv_header() + "\n" + eval_csv_row(em) + "\n");
  }
  return em;
}

// ----- detachment sweep -----------------------------------------------------------

struct SweepRow {
  std::string order;  // "retain_top" (main) or "retain_bottom" (control)
  std::vector<int> retained;
  EvalMetrics metrics;
  bool collapse_flag = false;  // the zero-expert row
};

struct SweepReport {
  std::vector<int> ranking;  // descending contribution
  std::vector<SweepRow> rows;
};

/// Retained sets of size K..1 keeping the top contributors (no retraining),
/// the mirror control that keeps the bottom contributors instead, and the
/// flagged zero-expert row.
inline SweepReport detach_sweep(ToveModel& model, const Dataset& val, TransferStrategy strategy) {
  TOVE_CHECK(model.contrib.count > 0.0, "checkpoint carries no contribution statistics");
  SweepReport report;
  report.ranking = rank_experts(model.contrib);
  const std::size_t K = model.expert_count();
  for (std::size_t size = K; size >= 1; --size) {
    SweepRow top;
    top.order = "retain_top";
    top.retained.assign(report.ranking.begin(), report.ranking.begin() + static_cast<std::ptrdiff_t>(size));
    std::sort(top.retained.begin(), top.retained.end());
    top.metrics = evaluate_model(model, val, top.retained, strategy);
    report.rows.push_back(std::move(top));

    SweepRow bottom;
    bottom.order = "retain_bottom";
    bottom.retained.assign(report.ranking.end() - static_cast<std::ptrdiff_t>(size), report.ranking.end());
    std::sort(bottom.retained.begin(), bottom.retained.end());
    bottom.metrics = evaluate_model(model, val, bottom.retained, strategy);
    report.rows.push_back(std::move(bottom));
  }
  SweepRow none;
  none.order = "retain_top";
  none.collapse_flag = true;
  none.metrics = evaluate_model(model, val, {}, strategy);
  report.rows.push_back(std::move(none));
  return report;
}

inline void cmd_detach_sweep(const std::string& checkpoint_path, const std::string& data_dir,
                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto [model, cfg] = model_from_checkpoint(load_checkpoint(checkpoint_path));
  Dataset val = prepare_dataset(load_dataset((fs::path(data_dir) / "val.tds").string()).scenes,
                                cfg.dims.vocab);
  SweepReport report = detach_sweep(model, val, cfg.transfer);

  std::ostringstream os;
  os << "order,retained_count,retained_ids,expert_attr_acc,overall_acc,relation_acc,lm,collapse\n";
  for (const SweepRow& row : report.rows) {
    os << row.order << "," << row.retained.size() << ",";
    for (std::size_t i = 0; i < row.retained.size(); ++i) os << (i ? ";" : "") << row.retained[i];
    os << "," << fmt_g17(row.metrics.expert_attr_acc) << "," << fmt_g17(row.metrics.overall_acc)
       << "," << fmt_g17(row.metrics.relation_acc) << "," << fmt_g17(row.metrics.lm) << ","
       << (row.collapse_flag ? 1 : 0) << "\n";
  }
  write_text_file(fs::path(out_dir) / "sweep.csv", os.str());

  std::ostringstream human;
  human << "contribution ranking (descending): ";
  for (std::size_t i = 0; i < report.ranking.size(); ++i)
    human << (i ? ", " : "") << report.ranking[i] << " ("
          << model.contrib.mean[static_cast<std::size_t>(report.ranking[i])] << ")";
  human << "\nkeep-top sweep vs keep-bottom control, expert-attribute accuracy:\n";
  for (const SweepRow& row : report.rows)
    human << "  " << row.order << " size " << row.retained.size()
          << (row.collapse_flag ? " [zero-expert collapse row]" : "") << ": "
          << row.metrics.expert_attr_acc << "\n";
  write_text_file(fs::path(out_dir) / "sweep_report.txt", human.str());
}

// ----- routing-map dump --------------------------------------------------------------

inline std::string pgm_from_weights(const Tensor& weights, std::size_t grid, std::size_t expert) {
  std::ostringstream os;
  os << "P2\n" << grid << " " << grid << "\n255\n";
  for (std::size_t y = 0; y < grid; ++y) {
    for (std::size_t x = 0; x < grid; ++x) {
      const double w = weights.at(y * grid + x, expert);
      const int v = std::max(0, std::min(255, static_cast<int>(w * 255.0 + 0.5)));
      os << (x ? " " : "") << v;
    }
    os << "\n";
  }
  return os.str();
}

/// route-dump: per-sample token-grid weights as CSV plus one graymap per
/// expert, brighter = higher activation.
inline void cmd_route_dump(const std::string& checkpoint_path, const std::string& data_dir,
                           const std::string& out_dir, std::size_t count = 8) {
  fs::create_directories(out_dir);
  auto [model, cfg] = model_from_checkpoint(load_checkpoint(checkpoint_path));
  Dataset val = prepare_dataset(load_dataset((fs::path(data_dir) / "val.tds").string()).scenes,
                                cfg.dims.vocab);
  const std::vector<int> retained = cfg.retained_or_all();
  count = std::min(count, val.size());
  for (std::size_t i = 0; i < count; ++i) {
    const PreparedSample& ps = val.samples[i];
    Graph g;
    ForwardOptions opt;
    opt.mode = RunMode::Eval;
    opt.strategy = cfg.transfer;
    opt.retained = retained;
    opt.noise = false;
    ToveForward f = forward_tove(g, model, ps.rendered, ps.caption, opt);
    const Tensor& w = f.routing.weights;

    char tag[24];
    std::snprintf(tag, sizeof(tag), "%04u", static_cast<unsigned>(i));
    std::ostringstream csv;
    csv << model.dims.grid << "," << model.dims.grid << "\n";
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t k = 0; k < w.cols(); ++k) csv << (k ? "," : "") << fmt_g17(w.at(r, k));
      csv << "\n";
    }
    write_text_file(fs::path(out_dir) / ("route_" + std::string(tag) + ".csv"), csv.str());
    for (std::size_t k = 0; k < model.expert_count(); ++k)
      write_text_file(fs::path(out_dir) / ("route_" + std::string(tag) + "_" +
                                           model.hub.experts[k].name + ".pgm"),
                      pgm_from_weights(w, model.dims.grid, k));
  }
}

// ----- ablations -----------------------------------------------------------------------

struct AblationRow {
  std::string axis, cell;
  std::uint64_t seed = 0;
  EvalMetrics metrics;
};

inline const std::vector<double>& lambda_sweep_values() {
  static const std::vector<double> v = {0.0, 0.05, 0.1, 0.3, 0.5, 1.0};
  return v;
}

/// One metrics row per (cell, seed); seeds are fixed across cells so every
/// comparison is paired.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis,
                                             const LoadedData& data,
                                             const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationRow> rows;
  auto pretrain_eval = [&](RunConfig cfg) {
    ToveModel model = build_model(cfg);
    train_model(model, cfg, data.train, RunMode::Pretrain);
    return evaluate_model(model, data.val, cfg.retained_or_all(), cfg.transfer);
  };
  for (std::uint64_t seed : seeds) {
    if (axis == "lambda") {
      for (double lambda : lambda_sweep_values()) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.lambda = lambda;
        AblationRow row{axis, fmt_g17(lambda), seed, pretrain_eval(cfg)};
        rows.push_back(std::move(row));
      }
    } else if (axis == "transfer") {
      for (TransferStrategy s :
           {TransferStrategy::Residual, TransferStrategy::Direct, TransferStrategy::Concat}) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.transfer = s;
        AblationRow row{axis, cfgdetail::transfer_name(s), seed, pretrain_eval(cfg)};
        rows.push_back(std::move(row));
      }
    } else if (axis == "balance") {
      const std::pair<const char*, std::pair<bool, bool>> cells[] = {
          {"none", {false, false}}, {"aux_only", {true, false}},
          {"noise_only", {false, true}}, {"both", {true, true}}};
      for (const auto& [name, flags] : cells) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.aux = flags.first;
        cfg.noise = flags.second;
        AblationRow row{axis, name, seed, pretrain_eval(cfg)};
        rows.push_back(std::move(row));
      }
    } else if (axis == "merge") {
      RunConfig cfg = base;
      cfg.seed = seed;
      ToveModel teacher = build_model(cfg);
      train_model(teacher, cfg, data.train, RunMode::Pretrain);
      CheckpointData teacher_ck = to_checkpoint(teacher, cfg);
      for (MergeStrategy s : {MergeStrategy::L2, MergeStrategy::Lm, MergeStrategy::LmL2}) {
        MergeSession session = init_merge(teacher_ck);
        session.cfg.merge = s;
        MergeReport rep = run_merge(session, data.train, data.val, &data.train);
        AblationRow row{axis, cfgdetail::merge_name(s), seed, rep.student_eval};
        rows.push_back(std::move(row));
      }
    } else {
      throw validation_error("unknown ablation axis '" + axis + "'");
    }
  }
  return rows;
}

inline void cmd_ablate(const RunConfig& base, const std::string& axis, const std::string& data_dir,
                       const std::string& out_dir, const std::vector<std::uint64_t>& seeds) {
  fs::create_directories(out_dir);
  LoadedData data = load_data_dir(data_dir, base.dims.vocab);
  std::vector<AblationRow> rows = run_ablation(base, axis, data, seeds);
  std::ostringstream os;
  os << "axis,cell,seed," << eval_csv_header() << "\n";
  for (const AblationRow& r : rows)
    os << r.axis << "," << r.cell << "," << r.seed << "," << eval_csv_row(r.metrics) << "\n";
  write_text_file(fs::path(out_dir) / "table.csv", os.str());
}

}  // namespace tove
