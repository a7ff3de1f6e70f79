#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitlab/analysis.hpp"
#include "circuitlab/dbm.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/training.hpp"

namespace circuitlab::pipeline {

struct PretrainConfig {
  int items_per_subtype = 300;
  training::SftConfig sft{.learning_rate = 0.003,
                          .epochs = 10,
                          .batch_size = 8,
                          .seed = 0,
                          .optimizer = {.kind = training::OptimizerKind::kAdam, .clip_norm = 1.0},
                          .regularization = std::nullopt};
};

struct SweepConfig {
  /// Explicit NTS targets; when empty, n_targets evenly spaced values in [min_target, max_target].
  std::vector<double> targets;
  int n_targets = 5;
  double min_target = 0.5;
  double max_target = 0.95;

  std::vector<double> resolved() const;
};

/// Every stage's configuration. Stage seeds are derived from `seed`; seed
/// fields inside the stage blocks are ignored by the pipeline.
struct MasterConfig {
  std::uint64_t seed = 0;
  model::ModelConfig model;
  tasks::GenConfig tasks;
  PretrainConfig pretrain;
  training::SftConfig sft{.learning_rate = 0.2,
                          .epochs = 5,
                          .batch_size = 1,
                          .seed = 0,
                          .optimizer = {.clip_norm = 1.0},
                          .regularization = std::nullopt};
  training::RlConfig rl;
  /// RL checkpoint blocks ("epochs"); the iteration count is rl_epochs * block size.
  int rl_epochs = 5;
  /// Also train RL from the base checkpoint for comparison.
  bool rl_from_base = false;
  int triplets_per_hypothesis = 64;
  std::vector<tasks::Hypothesis> hypotheses{tasks::Hypothesis::kAnswerKeySwap, tasks::Hypothesis::kEntitySwap,
                                            tasks::Hypothesis::kTaskTypeSwap};
  dbm::DbmConfig dbm;
  analysis::AnalysisConfig analysis;
  SweepConfig sweep;
  std::set<std::string> formats{"csv", "json", "svg"};

  void validate() const;
};

void to_json(nlohmann::json& j, const MasterConfig& c);
void from_json(const nlohmann::json& j, MasterConfig& c);
MasterConfig load_master_config(const std::filesystem::path& path);

/// Iterations per RL block so that a block samples about as many answer
/// tokens as one SFT epoch trains on.
int rl_block_size(const MasterConfig& config, const std::vector<tasks::TaskItem>& new_task);

inline const std::vector<std::string> kStages{"tasks", "base", "sft", "rl", "rl_from_base",
                                              "triplets", "dbm", "analysis", "reports"};

/// Artifact index of a run. All paths are relative to the run directory.
struct RunManifest {
  std::string run_id;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<std::string> completed_stages;
  std::map<std::string, std::string> suite;        // new_task, retention, pretrain
  std::string base_checkpoint;
  std::vector<std::string> sft_checkpoints;        // per epoch
  std::vector<std::string> rl_checkpoints;         // per block
  std::vector<std::string> rl_from_base_checkpoints;
  std::map<std::string, std::string> traces;       // pretrain, sft, rl, rl_from_base
  std::map<std::string, std::string> triplets;     // per hypothesis
  std::map<std::string, std::string> circuits;     // per checkpoint tag
  std::map<std::string, std::string> circuit_traces;
  std::string analysis;
  std::vector<std::string> reports;

  bool completed(const std::string& stage) const;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest load_manifest(const std::filesystem::path& run_dir);
void save_manifest(const RunManifest& m, const std::filesystem::path& run_dir);

/// Checkpoint tag and path in causal order: base, sft_e*, rl_e*, rlbase_e*.
struct CheckpointRef {
  std::string tag;
  std::string stage;  // base | sft | rl | rl_from_base
  int epoch = 0;
  std::string path;
};
std::vector<CheckpointRef> checkpoints_in_order(const RunManifest& m);

struct TrajectoryRow {
  std::string stage;
  int epoch = 0;
  std::string checkpoint;
  double nts = 0.0;
  std::optional<double> retention_pct;
  std::optional<double> faithfulness;
  std::optional<double> dcm;
  double kl_drift = 0.0;
  std::map<std::string, double> retention_accuracy;  // per retention subtype
};

nlohmann::json to_json(const TrajectoryRow& r);
TrajectoryRow trajectory_row_from_json(const nlohmann::json& j);

struct SweepRow {
  std::string objective;
  double target = 0.0;
  bool reached = false;
  std::string checkpoint;
  int epoch = 0;
  double nts = 0.0;
  std::optional<double> retention_pct;
};

nlohmann::json to_json(const SweepRow& r);

/// For each objective (stage name among the rows, base excluded) and target,
/// the earliest row with nts >= target; unreached targets are kept and marked.
std::vector<SweepRow> sweep_nts(const std::vector<TrajectoryRow>& rows, const std::vector<double>& targets);
/// Manifest form: reads the stored trajectory; requires two checkpoints per objective.
std::vector<SweepRow> sweep_nts(const std::filesystem::path& run_dir, const RunManifest& manifest,
                                const std::vector<double>& targets);

/// Reported, never asserted.
struct DirectionalFlags {
  std::optional<bool> rl_retention_geq_sft;  // at every NTS target both objectives reach
  int matched_targets = 0;
  std::optional<bool> sft_adapts_faster;     // needs the RL-from-base run
};

nlohmann::json to_json(const DirectionalFlags& f);
DirectionalFlags directional_flags(const std::vector<SweepRow>& sweep);

/// Runs (or resumes) every stage under `run_dir`. A stage failure throws
/// StageError after the manifest of the completed stages has been written.
RunManifest run_pipeline(const MasterConfig& config, const std::filesystem::path& run_dir);

/// Writes the report files for the requested formats ("csv", "json", "svg")
/// from stored analysis results. Returns relative paths in write order.
std::vector<std::string> emit_reports(const std::filesystem::path& run_dir, const RunManifest& manifest,
                                      const std::set<std::string>& formats);

}  // namespace circuitlab::pipeline
