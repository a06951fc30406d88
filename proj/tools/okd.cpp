#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "okd/experiment.hpp"

namespace {

okd::ExperimentConfig load_with_overrides(const std::string& config_path,
                                          long long seed_override,
                                          const std::string& out_dir) {
  okd::ExperimentConfig cfg = okd::load_config_file(config_path);
  if (seed_override >= 0) {
    cfg.seed_init = std::uint64_t(seed_override);
    cfg.seed_shuffle = std::uint64_t(seed_override) + 1000003ULL;
  }
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  return cfg;
}

void print_eval(const okd::EvalResult& eval) {
  std::cout << "samples: " << eval.samples << "\n";
  for (std::size_t b = 0; b < eval.branch_top1.size(); ++b) {
    std::cout << "branch " << b << " top-1 error: " << eval.branch_top1[b]
              << "%\n";
  }
  std::cout << "leader top-1 error: " << eval.leader_top1 << "%\n";
  if (!std::isnan(eval.leader_top5)) {
    std::cout << "leader top-5 error: " << eval.leader_top5 << "%\n";
  }
  std::cout << "aux ensemble top-1 error: " << eval.ensemble_top1 << "%\n";
  if (!std::isnan(eval.interrater)) {
    std::cout << "interrater agreement s: " << eval.interrater << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-branch online knowledge distillation experiments"};
  app.require_subcommand(1);

  std::string config_path, resume_path, out_dir, checkpoint_path;
  std::string format = "csv";
  long long seed_override = -1;

  auto* train = app.add_subcommand("train", "Run one training experiment");
  train->add_option("--config", config_path, "Config JSON path")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");
  train->add_option("--seed-override", seed_override,
                    "Replace seed_init (seed_shuffle becomes value+1000003)");
  train->add_option("--out-dir", out_dir, "Override output directory");

  auto* evaluate = app.add_subcommand("evaluate",
                                      "Evaluate a checkpoint on the test split");
  evaluate->add_option("--config", config_path, "Config JSON path")->required();
  evaluate->add_option("--checkpoint", checkpoint_path, "Checkpoint path")
      ->required();

  auto* ablate = app.add_subcommand(
      "ablate", "Run the attention-mechanism x CD-loss ablation matrix");
  ablate->add_option("--config", config_path, "Config JSON path")->required();
  ablate->add_option("--seed-override", seed_override, "Replace seeds");
  ablate->add_option("--out-dir", out_dir, "Override output directory");

  auto* export_cmd =
      app.add_subcommand("export", "Export run metrics as csv or json");
  export_cmd->add_option("--out-dir", out_dir, "Run directory")->required();
  export_cmd->add_option("--format", format, "csv or json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      auto cfg = load_with_overrides(config_path, seed_override, out_dir);
      okd::RunResult res = okd::run_experiment(cfg, resume_path);
      std::cout << "run dir: " << res.run_dir << " (config " << res.hash
                << ")\n";
      if (!res.records.empty() && res.records.back().eval) {
        print_eval(*res.records.back().eval);
      }
    } else if (*evaluate) {
      auto cfg = load_with_overrides(config_path, -1, "");
      auto [train_ds, test_ds] = okd::load_experiment_dataset(cfg);
      (void)train_ds;
      okd::Rng rng(cfg.seed_init);
      okd::NetConfig net_cfg = cfg.net;
      net_cfg.num_classes = test_ds.num_classes;
      net_cfg.in_channels = test_ds.channels;
      net_cfg.height = test_ds.height;
      net_cfg.width = test_ds.width;
      okd::MultiBranchNet net = okd::MultiBranchNet::build(net_cfg, rng);
      auto attention = okd::make_attention(cfg.mechanism, net, rng);
      okd::Checkpoint ck = okd::read_checkpoint(checkpoint_path);
      okd::restore_training_state(ck, net, attention.get(), nullptr, nullptr);
      okd::EvalOptions opts;
      opts.diversity_all_branches = cfg.diversity_all_branches;
      print_eval(okd::evaluate(net, test_ds, opts));
    } else if (*ablate) {
      auto cfg = load_with_overrides(config_path, seed_override, out_dir);
      okd::AblationTable table = okd::run_ablation(cfg);
      std::cout << "wrote " << table.csv_path << "\n";
      for (const auto& cell : table.cells) {
        std::cout << okd::attention_kind_name(cell.mechanism)
                  << (cell.cd ? " +cd" : " -cd") << ": ";
        if (cell.ok) {
          std::cout << "top1 " << cell.eval.leader_top1 << "% top5 "
                    << cell.eval.leader_top5 << "% s " << cell.eval.interrater
                    << "\n";
        } else {
          std::cout << "failed: " << cell.error << "\n";
        }
      }
    } else if (*export_cmd) {
      std::cout << okd::export_metrics(out_dir, format) << "\n";
    }
  } catch (const okd::NanLossError& e) {
    std::cerr << "aborted: " << e.what()
              << " (last good checkpoint retained)\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
