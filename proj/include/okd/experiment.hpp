#pragma once

#include <optional>
#include <string>
#include <vector>

#include "okd/metrics.hpp"
#include "okd/trainer.hpp"

namespace okd {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar10 | cifar100
  std::string path;                // cifar binary directory; falls back to
                                   // the OKD_DATA_ROOT environment variable
  SyntheticSpec synthetic;
  std::size_t subset_train = 0;  // optional cap on training samples (0 = all)
};

/// Declarative description of one training run. Everything that affects the
/// numbers lives here; the config hash of the canonical JSON form is stamped
/// into every artifact.
struct ExperimentConfig {
  DatasetConfig dataset;
  NetConfig net;  // input dims are overwritten from the loaded dataset
  AttentionKind mechanism = AttentionKind::FeatureFusion;
  Coefficients loss;
  SgdConfig optim;          // lr field is driven by the schedule
  Schedule schedule;        // total_epochs mirrors `epochs`
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  std::size_t eval_interval = 1;
  std::size_t checkpoint_interval = 1;
  bool augment = false;
  std::size_t augment_pad = 4;
  std::uint64_t seed_init = 1;
  std::uint64_t seed_shuffle = 2;
  bool diversity_all_branches = false;
  std::string output_dir = "runs/exp";
  // ablation matrix (used by run_ablation)
  std::vector<AttentionKind> ablation_mechanisms = {
      AttentionKind::FeatureFusion, AttentionKind::Gate,
      AttentionKind::SelfAttention};
  std::vector<bool> ablation_cd = {true, false};
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

/// Full validation pass; returns one message per violated field (empty when
/// the config is acceptable).
std::vector<std::string> validate_config(const ExperimentConfig& config);

/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct MetricsRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown losses;
  std::optional<EvalResult> eval;
  double wall_seconds = 0.0;
  std::string config_hash;
};

std::string metrics_record_to_json(const MetricsRecord& record);
MetricsRecord metrics_record_from_json(const std::string& line);

struct RunResult {
  std::string run_dir;
  std::string hash;
  std::vector<MetricsRecord> records;
  EvalResult final_eval;
};

/// Trains per the config: writes config.json, metrics.jsonl, a rolling
/// last.ckpt, and on completion final.ckpt plus leader_final.ckpt (the
/// deployable trunk + group-leader subgraph). A non-finite loss aborts with
/// the last good checkpoint left in place.
RunResult run_experiment(const ExperimentConfig& config,
                         const std::string& resume_path = "");

struct AblationCell {
  AttentionKind mechanism = AttentionKind::FeatureFusion;
  bool cd = false;
  bool ok = false;
  std::string error;
  EvalResult eval;
};

struct AblationTable {
  std::vector<AblationCell> cells;
  std::string csv_path;
};

/// Runs the mechanism x CD matrix with shared seeds; a failing cell is
/// marked and the remaining cells still run. Emits ablation.csv under the
/// config's output directory.
AblationTable run_ablation(const ExperimentConfig& config);

/// Exports <run_dir>/metrics.jsonl as metrics.csv or metrics.json; returns
/// the output path. The CSV column order is documented in its header line.
std::string export_metrics(const std::string& run_dir,
                           const std::string& format);

/// Reads back a CSV produced by export_metrics (round-trip safe).
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

/// Loads the dataset pair named by the config (applying subset_train).
std::pair<Dataset, Dataset> load_experiment_dataset(
    const ExperimentConfig& config);

}  // namespace okd
