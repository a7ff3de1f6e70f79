#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::dbm {

struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.05;
  int total_steps = 100;
};

/// start * (end / start)^(step / total_steps).
double anneal_temperature(const TemperatureSchedule& schedule, int step);

/// One logit per head, layer-major; mask m_h = sigmoid(logit_h / temperature).
struct MaskState {
  std::vector<double> logits;
  double temperature = 1.0;

  static MaskState initial(const model::ModelConfig& config, double temperature);
  std::vector<double> masks() const;
};

double sigmoid(double x);

struct DbmConfig {
  double lambda = 0.01;
  int steps = 300;
  int batch_size = 16;
  double learning_rate = 0.05;
  double tau_start = 1.0;
  double tau_end = 0.05;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DbmConfig& c);
void from_json(const nlohmann::json& j, DbmConfig& c);

/// Heads with mask strictly above the threshold.
model::HeadSet binarize(const model::ModelConfig& config, std::span<const double> masks, double threshold);
/// Flat-index form of binarize.
std::vector<int> binarize(std::span<const double> masks, double threshold);

struct Circuit {
  std::string model_tag;
  model::ModelConfig model_config;
  DbmConfig config;
  double threshold = 0.5;
  std::vector<double> masks;  // layer-major, one per head
  model::HeadSet selected;
  std::optional<double> faithfulness;
  bool discovery_failed = false;
  std::string failure_reason;
  double final_nll = 0.0;  // mean -log p(target) at the final masks
  double base_nll = 0.0;   // same with every mask at 0

  double mask(model::HeadId h) const { return masks.at(model::flat_index(model_config, h)); }
  bool contains(model::HeadId h) const { return selected.count(h) > 0; }
};

nlohmann::json to_json(const Circuit& c);
Circuit circuit_from_json(const nlohmann::json& j);
void save_circuit(const Circuit& c, const std::filesystem::path& path);
Circuit load_circuit(const std::filesystem::path& path);

/// Circuit with the given selection and indicator masks, e.g. for analysis fixtures.
Circuit circuit_from_heads(const model::ModelConfig& config, const model::HeadSet& heads, std::string tag = "");

/// A triplet with its source-run activations cached. Scoring inputs append
/// all but the last target token to base and source alike.
struct PreparedTriplet {
  std::vector<int> base_input;
  std::vector<int> target;
  std::size_t prompt_length = 0;
  model::ActivationCache source;
};

PreparedTriplet prepare_triplet(const model::CompiledModel& model, const tasks::Triplet& t);

struct DbmLoss {
  double loss = 0.0;
  double nll = 0.0;                // mean -log geometric-mean p(target)
  std::vector<double> mask_grads;  // dLoss/dm_h
  std::vector<double> logit_grads; // dLoss/dlogit_h
};

/// Mean over the batch of -log p(target | base, interpolated heads) plus lambda * sum(m).
DbmLoss dbm_loss_and_grad(const model::CompiledModel& model, const MaskState& mask,
                          std::span<const PreparedTriplet> batch, double lambda);

/// Loss value only; computes the source caches itself.
double dbm_loss(const model::ModelParams& params, const MaskState& mask, std::span<const tasks::Triplet> batch,
                double lambda);

struct TracePoint {
  int step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double mask_sum = 0.0;
};

nlohmann::json to_json(const TracePoint& p);

struct Discovery {
  Circuit circuit;
  std::vector<TracePoint> trace;
};

/// Adam on the mask logits with the annealed temperature. A result whose
/// selection is empty without improving the target log-probability over the
/// unpatched run is flagged as a discovery failure.
Discovery discover_circuit(const model::ModelParams& params, std::span<const tasks::Triplet> triplets,
                           const DbmConfig& config, std::string model_tag = "");

}  // namespace circuitlab::dbm
