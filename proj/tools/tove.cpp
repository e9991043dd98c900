// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: dataset generation, training phases, evaluation,
// detachment sweeps, routing-map dumps, and ablation tables.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tove/tove.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  std::string hub_path;
  std::string retain = "";
  std::uint64_t seed = 0;
  bool seed_set = false;
  double lambda = -1.0;
};

tove::RunConfig resolve_config(const CommonArgs& args) {
  tove::RunConfig cfg;
  if (!args.config_path.empty()) cfg = tove::load_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.lambda >= 0.0) cfg.lambda = args.lambda;
  if (!args.retain.empty()) cfg.retained = tove::cfgdetail::retained_from(args.retain);
  cfg.validate();
  return cfg;
}

void print_eval(const tove::EvalMetrics& em) {
  std::printf("lm loss            %.6f\n", em.lm);
  std::printf("overall accuracy   %.4f\n", em.overall_acc);
  std::printf("color accuracy     %.4f\n", em.color_acc);
  std::printf("expert-attr acc    %.4f\n", em.expert_attr_acc);
  std::printf("relation accuracy  %.4f\n", em.relation_acc);
  const char* fam[4] = {"shape", "texture", "depth", "edge"};
  for (int f = 0; f < 4; ++f)
    std::printf("%-8s accuracy   %.4f  (n=%g)\n", fam[f], em.family_acc[static_cast<std::size_t>(f)],
                em.family_count[static_cast<std::size_t>(f)]);
  if (!em.mean_weights.empty()) {
    std::printf("routing entropy    %.4f\nmean weights      ", em.entropy);
    for (double w : em.mean_weights) std::printf(" %.4f", w);
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-aware vision-expert transfer, desk scale"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string axis = "lambda";
  std::string merge_strategy;
  std::string baseline;
  std::string seeds_csv = "1,2,3,4,5";
  std::size_t dump_count = 8;

  auto add_common = [&](CLI::App* cmd, bool with_data, bool with_out) {
    cmd->add_option("--config", args.config_path, "run configuration file");
    cmd->add_option("--seed", args.seed, "seed override")->each([&](const std::string&) {
      args.seed_set = true;
    });
    cmd->add_option("--lambda", args.lambda, "residual transfer coefficient override");
    cmd->add_option("--retain", args.retain, "retained expert ids, e.g. 0,2,3");
    if (with_data) cmd->add_option("--data", args.data_dir, "dataset directory")->required();
    if (with_out) cmd->add_option("--out", args.out_dir, "output directory")->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate dataset files");
  add_common(gen, false, true);

  CLI::App* pre = app.add_subcommand("pretrain", "language-model pre-training");
  add_common(pre, true, true);

  CLI::App* fin = app.add_subcommand("finetune", "adaptor fine-tuning from a checkpoint");
  add_common(fin, true, true);
  fin->add_option("--checkpoint", args.checkpoint, "starting checkpoint")->required();
  fin->add_option("--hub", args.hub_path, "hub manifest to check against the checkpoint");

  CLI::App* mrg = app.add_subcommand("merge", "knowledge merging into an encoder clone");
  add_common(mrg, true, true);
  mrg->add_option("--checkpoint", args.checkpoint, "teacher checkpoint")->required();
  mrg->add_option("--merge-strategy", merge_strategy, "l2 | lm | lm_l2");
  mrg->add_option("--baseline", baseline, "no-expert baseline checkpoint for the report");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, true, false);
  ev->add_option("--checkpoint", args.checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--out", args.out_dir, "optional output directory for eval.csv");
  ev->add_option("--hub", args.hub_path, "hub manifest to check against the checkpoint");

  CLI::App* sweep = app.add_subcommand("detach-sweep", "contribution-ordered expert removal");
  add_common(sweep, true, true);
  sweep->add_option("--checkpoint", args.checkpoint, "checkpoint with contribution stats")->required();

  CLI::App* dump = app.add_subcommand("route-dump", "routing-map CSV + graymap images");
  add_common(dump, true, true);
  dump->add_option("--checkpoint", args.checkpoint, "checkpoint to visualize")->required();
  dump->add_option("--count", dump_count, "number of validation samples to dump");

  CLI::App* abl = app.add_subcommand("ablate", "paired ablation table over one axis");
  add_common(abl, true, true);
  abl->add_option("--axis", axis, "lambda | transfer | balance | merge");
  abl->add_option("--seeds", seeds_csv, "comma-separated seeds, fixed across cells");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      tove::cmd_gen_data(resolve_config(args), args.out_dir);
    } else if (pre->parsed()) {
      tove::cmd_pretrain(resolve_config(args), args.data_dir, args.out_dir);
    } else if (fin->parsed()) {
      tove::cmd_finetune(resolve_config(args), args.checkpoint, args.data_dir, args.out_dir,
                         args.hub_path);
    } else if (mrg->parsed()) {
      tove::RunConfig cfg = resolve_config(args);
      if (!merge_strategy.empty()) cfg.merge = tove::cfgdetail::merge_from(merge_strategy);
      tove::MergeReport report =
          tove::cmd_merge(cfg, args.checkpoint, args.data_dir, args.out_dir, baseline);
      std::printf("mean gap %.6f -> %.6f\n", report.initial_gap, report.final_gap);
      std::printf("student expert-attr accuracy %.4f (teacher %.4f)\n",
                  report.student_eval.expert_attr_acc, report.teacher_eval.expert_attr_acc);
    } else if (ev->parsed()) {
      std::vector<int> retain;
      const bool has_retain = !args.retain.empty();
      if (has_retain) retain = tove::cfgdetail::retained_from(args.retain);
      tove::EvalMetrics em = tove::cmd_eval(args.checkpoint, args.data_dir, args.out_dir,
                                            has_retain ? &retain : nullptr, args.hub_path);
      print_eval(em);
    } else if (sweep->parsed()) {
      tove::cmd_detach_sweep(args.checkpoint, args.data_dir, args.out_dir);
    } else if (dump->parsed()) {
      tove::cmd_route_dump(args.checkpoint, args.data_dir, args.out_dir, dump_count);
    } else if (abl->parsed()) {
      std::vector<std::uint64_t> seeds;
      std::stringstream ss(seeds_csv);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) seeds.push_back(std::stoull(item));
      }
      if (seeds.empty()) throw tove::validation_error("ablate: no seeds given");
      tove::cmd_ablate(resolve_config(args), axis, args.data_dir, args.out_dir, seeds);
    }
  } catch (const tove::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind == tove::ErrorKind::Io ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
