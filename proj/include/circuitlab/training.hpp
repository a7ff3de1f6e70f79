#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::training {

using model::ModelParams;
using model::ParamGrads;

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Rescale the gradient to this global L2 norm when it is larger; 0 disables.
  double clip_norm = 0.0;
};

/// Applies gradient steps to float parameters; the arithmetic is double and
/// the result is rounded once per step.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, double learning_rate);
  void step(ModelParams& params, const ParamGrads& grads);
  int steps() const { return t_; }

 private:
  OptimizerConfig config_;
  double lr_;
  int t_ = 0;
  std::optional<ParamGrads> m_, v_;
};

/// Penalty on activation drift of selected heads away from a reference model.
struct CircuitRegularization {
  model::HeadSet heads;
  double strength = 0.0;
};

struct SftConfig {
  double learning_rate = 0.05;
  int epochs = 5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  std::optional<CircuitRegularization> regularization;
};

struct RlConfig {
  int group_size = 8;
  int refinement_steps = 2;
  double learning_rate = 0.05;
  double temperature = 1.0;
  double clip_epsilon = 0.2;
  int iterations = 200;
  std::uint64_t seed = 0;
  double kl_penalty_weight = 0.0;
  int prompts_per_iteration = 4;
  bool normalize_std = false;
  /// Consecutive all-zero-reward iterations tolerated before aborting.
  int zero_reward_patience = 50;
  /// Iterations per checkpoint block; 0 keeps only the final parameters.
  int block_size = 0;
  OptimizerConfig optimizer;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);
void to_json(nlohmann::json& j, const RlConfig& c);
void from_json(const nlohmann::json& j, RlConfig& c);

struct TraceRecord {
  int step = 0;
  double loss = 0.0;
  std::optional<double> mean_reward;
  double nts = 0.0;
  /// Index into TrainTrace::checkpoints when this step closed a checkpoint block.
  std::optional<int> checkpoint;
  std::string checkpoint_path;
};

nlohmann::json to_json(const TraceRecord& r);

struct TrainTrace {
  /// Evaluation of the starting parameters.
  TraceRecord initial;
  /// One record per completed epoch (SFT) or iteration (RL).
  std::vector<TraceRecord> records;
  std::vector<ModelParams> checkpoints;
};

struct TrainResult {
  ModelParams params;
  TrainTrace trace;
};

/// Completion-only cross-entropy on the suite's new-task items. Prompt
/// positions carry no loss; each item's loss is the mean over its answer
/// tokens (gold choice then end-of-answer), and batches average over items.
TrainResult train_sft(const ModelParams& params, const tasks::TaskSuite& suite, const SftConfig& config);

/// Same loop on an explicit item list (e.g. pretraining on retention items).
TrainResult train_sft_items(const ModelParams& params, std::span<const tasks::TaskItem> items,
                            std::span<const tasks::TaskItem> eval_items, const SftConfig& config,
                            const ModelParams* reference = nullptr);

/// train_sft plus strength/T * sum over regularized heads of ||z_h - z_h(reference)||^2
/// per sequence. Requires config.regularization.
TrainResult train_sft_circuit_reg(const ModelParams& params, const tasks::TaskSuite& suite,
                                  const SftConfig& config, const ModelParams& reference);

/// r_i - mean(r), optionally divided by the population standard deviation
/// (left unscaled when it is zero).
std::vector<double> group_advantages(std::span<const double> rewards, bool normalize_std = false);

/// Dr.GRPO on the suite's new-task items with exact-match rewards.
TrainResult train_rl_drgrpo(const ModelParams& params, const tasks::TaskSuite& suite, const RlConfig& config);

/// Same loop on an explicit item list.
TrainResult train_rl_items(const ModelParams& params, std::span<const tasks::TaskItem> items,
                           std::span<const tasks::TaskItem> eval_items, const RlConfig& config);

/// KL(p || q) over a categorical distribution; terms with p_i = 0 contribute 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Mean over items and gold-answer token positions of KL(base || theta),
/// teacher-forced on the gold choice, full vocabulary.
double kl_drift(const ModelParams& base, const ModelParams& theta, std::span<const tasks::TaskItem> items);

/// Mean over items, positions and the given heads of ||z_h(theta) - z_h(base)||^2
/// on the items' prompts.
double activation_drift(const ModelParams& base, const ModelParams& theta, std::span<const tasks::TaskItem> items,
                        const model::HeadSet& heads);

}  // namespace circuitlab::training
