#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "circuitlab/model.hpp"

namespace circuitlab::model {

/// Hand-wired model whose single designated head copies the option that the
/// final answer key points at into an answer register read by the unembedding.
/// Every other head and MLP writes small seeded noise into unused residual
/// dimensions. Residual layout: token one-hot | position one-hot | answer
/// register | scratch.
struct PlantedSpec {
  ModelConfig config{.n_layers = 2, .n_heads = 4, .d_model = 256, .d_head = 64, .d_mlp = 16,
                     .vocab_size = 64, .max_seq_len = 48, .seed = 0};
  HeadId head{1, 2};
  /// Answer key k selects option slot (k + key_shift) mod 4.
  int key_shift = 0;
  /// Target logit gap between the selected option and every other token.
  double logit_margin = 6.0;
  /// Attention score scale; 1.0 gives a score gap of about 16.
  double attention_gain = 1.0;
  double noise_scale = 0.1;
};

void to_json(nlohmann::json& j, const PlantedSpec& s);
void from_json(const nlohmann::json& j, PlantedSpec& s);

struct PlantedModel {
  ModelParams params;
  HeadSet planted;
};

/// Throws ConfigError when the residual layout does not fit the config.
PlantedModel build_planted_model(const PlantedSpec& spec);

}  // namespace circuitlab::model
