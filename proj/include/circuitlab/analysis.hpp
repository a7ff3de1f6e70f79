#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitlab/dbm.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::analysis {

using dbm::Circuit;
using model::HeadId;
using model::HeadSet;
using model::ModelParams;

enum class AblationMode { kCounterfactual, kMean };

std::string to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);

struct AnalysisConfig {
  double delta = 0.2;
  AblationMode mode = AblationMode::kCounterfactual;
  int eval_items = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AnalysisConfig& c);
void from_json(const nlohmann::json& j, AnalysisConfig& c);

/// Replacement activations for ablated heads over a fixed item list.
/// Counterfactual mode pairs every item with a different item of the same
/// prompt length (a seeded derangement) and uses that item's run on the same
/// answer tokens; mean mode uses per-position means over all scoring inputs
/// of the same length.
class Ablation {
 public:
  Ablation(const model::CompiledModel& model, std::span<const tasks::TaskItem> items, AblationMode mode,
           std::uint64_t seed);
  /// Counterfactual ablation with explicit partners (partner[i] = i replays the item's own run).
  static Ablation with_partners(const model::CompiledModel& model, std::span<const tasks::TaskItem> items,
                                std::vector<int> partners);

  /// log geometric-mean probability of each choice of item i with `ablated` heads replaced.
  std::vector<double> choice_log_probs(std::size_t i, const HeadSet& ablated) const;
  std::size_t size() const { return items_.size(); }
  const tasks::TaskItem& item(std::size_t i) const { return items_[i]; }
  const std::vector<int>& partners() const { return partners_; }

 private:
  Ablation(const model::CompiledModel& model, std::span<const tasks::TaskItem> items);
  void build_counterfactual();
  void build_mean();

  const model::CompiledModel* model_;
  std::span<const tasks::TaskItem> items_;
  AblationMode mode_ = AblationMode::kCounterfactual;
  std::vector<int> partners_;
  // Per item, per scoring input: replacement z per layer.
  std::vector<std::vector<std::vector<model::MatD>>> replacement_;
};

struct EvalResult {
  double score = 0.0;
  std::vector<std::vector<double>> choice_probs;  // per item, per choice
  std::vector<int> predictions;
  int n_items = 0;
  std::string ablation = "none";  // "none" or "circuit-only"
  AblationMode mode = AblationMode::kCounterfactual;
};

nlohmann::json to_json(const EvalResult& r);

/// Accuracy by argmax of geometric-mean choice probabilities. With a circuit,
/// every head outside it is ablated per `mode`.
EvalResult eval_task(const ModelParams& params, std::span<const tasks::TaskItem> items, const Circuit* circuit,
                     AblationMode mode, std::uint64_t seed = 0);

/// F(circuit-only) / F(model); nullopt when F(model) = 0.
std::optional<double> faithfulness(const Circuit& circuit, const ModelParams& params,
                                   std::span<const tasks::TaskItem> items, AblationMode mode, std::uint64_t seed = 0);

/// m_model - m_base per head, layer-major.
std::vector<double> mask_shift(const Circuit& base, const Circuit& model);

/// {h : m_sft[h] < m_rl[h] - delta}.
HeadSet vulnerable_heads(const model::ModelConfig& config, std::span<const double> m_sft,
                         std::span<const double> m_rl, double delta);
HeadSet vulnerable_heads(const Circuit& sft, const Circuit& rl, double delta);

/// 100 * part / whole.
double percent(double part, double whole);
/// 100 * |base ∩ model| / |base|.
double retention_pct(const Circuit& base, const Circuit& model);
double retention_pct(const HeadSet& base, const HeadSet& model);

struct Overlap {
  // Venn regions over (base, sft, rl).
  int base_only = 0, sft_only = 0, rl_only = 0;
  int base_sft_only = 0, base_rl_only = 0, sft_rl_only = 0;
  int all_three = 0;
  /// Pairwise intersections, order base, sft, rl; diagonal holds circuit sizes.
  std::array<std::array<int, 3>, 3> matrix{};
};

nlohmann::json to_json(const Overlap& o);
Overlap overlap_counts(const HeadSet& base, const HeadSet& sft, const HeadSet& rl);
Overlap overlap_counts(const Circuit& base, const Circuit& sft, const Circuit& rl);

struct LayerCounts {
  int layer = 0;
  int retained = 0;
  int forgotten = 0;
  int added = 0;
};

std::vector<LayerCounts> layer_retention_profile(const model::ModelConfig& config, const HeadSet& base,
                                                 const HeadSet& model);
std::vector<LayerCounts> layer_retention_profile(const Circuit& base, const Circuit& model);

/// Mean over items of log p(gold | intact) - log p(gold | head ablated).
double necessity_score(const ModelParams& params, HeadId head, std::span<const tasks::TaskItem> items,
                       AblationMode mode, std::uint64_t seed = 0);
/// (s_only(h) - s_none) / (s_all - s_none); nullopt when |s_all - s_none| < 1e-6.
std::optional<double> sufficiency_score(const ModelParams& params, HeadId head,
                                        std::span<const tasks::TaskItem> items, AblationMode mode,
                                        std::uint64_t seed = 0);

/// Both scores for every head, sharing one set of ablation activations.
struct HeadScores {
  std::vector<double> necessity;
  std::vector<std::optional<double>> sufficiency;
};
HeadScores head_scores(const Ablation& ablation, const model::ModelConfig& config);
HeadScores head_scores(const ModelParams& params, std::span<const tasks::TaskItem> items, AblationMode mode,
                       std::uint64_t seed = 0);

/// Accuracy of `base` with head h replaced by `finetuned`'s activation on the
/// same input, minus the plain accuracy of `base`.
double cmap_delta(const ModelParams& base, const ModelParams& finetuned, HeadId head,
                  std::span<const tasks::TaskItem> items);

/// Mean first-target-token logit gain at the final prompt position when the
/// given heads are patched from the source run. Empty head set gives 0.
double dcm_logit_gap(const ModelParams& params, const HeadSet& heads, std::span<const tasks::Triplet> triplets);
/// dcm_logit_gap over the circuit's heads; nullopt for an empty circuit.
std::optional<double> dcm_score(const ModelParams& params, const Circuit& circuit,
                                std::span<const tasks::Triplet> triplets);

/// Pearson correlation; nullopt when either input is constant.
std::optional<double> pearson_r(std::span<const double> xs, std::span<const double> ys);

struct HeadRow {
  HeadId head;
  double m_base = 0, m_sft = 0, m_rl = 0;
  double delta_sft = 0, delta_rl = 0;
  double nec_base = 0, nec_sft = 0, nec_rl = 0;
  std::optional<double> suf_base, suf_sft, suf_rl;
  bool in_base = false, in_sft = false, in_rl = false;
};

struct ComparisonReport {
  std::vector<HeadRow> heads;
  /// Unset when the base circuit is empty.
  std::optional<double> retention_sft;
  std::optional<double> retention_rl;
  Overlap overlap;
  HeadSet vulnerable;
  double delta = 0.2;
  std::optional<double> dcm_base, dcm_sft, dcm_rl;
  std::optional<double> pearson_sft, pearson_rl;
  std::vector<LayerCounts> layers_sft, layers_rl;
};

nlohmann::json to_json(const ComparisonReport& r);

struct ModelTriple {
  const ModelParams* base;
  const ModelParams* sft;
  const ModelParams* rl;
};

struct CircuitTriple {
  const Circuit* base;
  const Circuit* sft;
  const Circuit* rl;
};

ComparisonReport compare(const ModelTriple& models, const CircuitTriple& circuits,
                         std::span<const tasks::TaskItem> items, std::span<const tasks::Triplet> answer_swaps,
                         const AnalysisConfig& config);

}  // namespace circuitlab::analysis
