#include "circuitlab/planted.hpp"

#include <cmath>
#include <vector>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::model {

namespace v = tasks::vocab;

void to_json(nlohmann::json& j, const PlantedSpec& s) {
  j = {{"config", s.config},
       {"head", {s.head.layer, s.head.head}},
       {"key_shift", s.key_shift},
       {"logit_margin", s.logit_margin},
       {"attention_gain", s.attention_gain},
       {"noise_scale", s.noise_scale}};
}

void from_json(const nlohmann::json& j, PlantedSpec& s) {
  s = PlantedSpec{};
  if (j.contains("config")) s.config = j.at("config").get<ModelConfig>();
  if (j.contains("head")) {
    const auto h = j.at("head").get<std::vector<int>>();
    if (h.size() != 2) throw ConfigError("planted spec: head must be [layer, head]");
    s.head = {h[0], h[1]};
  }
  s.key_shift = j.value("key_shift", s.key_shift);
  s.logit_margin = j.value("logit_margin", s.logit_margin);
  s.attention_gain = j.value("attention_gain", s.attention_gain);
  s.noise_scale = j.value("noise_scale", s.noise_scale);
}

namespace {

void fill_noise(Mat<float>& m, Rng& rng, double scale) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(scale * rng.normal());
}

std::vector<int> calibration_prompt(int key) {
  std::vector<int> p{v::kBos, tasks::marker_token(tasks::TaskType::kLookup)};
  for (int s = 0; s < v::kChoices; ++s) {
    p.push_back(v::kKeyBase + s);
    p.push_back(v::kContentBegin + 5 * s + 3);
  }
  p.push_back(v::kKeyBase + key);
  return p;
}

}  // namespace

PlantedModel build_planted_model(const PlantedSpec& spec) {
  const ModelConfig& c = spec.config;
  c.validate();
  const int vocab = c.vocab_size;
  const int reg = vocab + c.max_seq_len;  // answer register offset
  const int scratch = reg + vocab;
  if (!contains(c, spec.head)) throw ConfigError("planted spec: head " + to_string(spec.head) + " outside config");
  if (spec.head.layer < 1) throw ConfigError("planted spec: planted head must sit above layer 0");
  if (scratch >= c.d_model) {
    throw ConfigError(fmt::format("planted spec: d_model {} cannot hold token, position and register blocks ({})",
                                  c.d_model, scratch + 1));
  }
  if (c.d_head < vocab) throw ConfigError(fmt::format("planted spec: d_head {} < vocab {}", c.d_head, vocab));
  if (vocab < v::kContentBegin + 5 * v::kChoices) throw ConfigError("planted spec: vocab too small for lookup items");
  if (c.max_seq_len < tasks::kNewTaskPromptLength) throw ConfigError("planted spec: max_seq_len too short");
  if (spec.logit_margin <= 0.0 || spec.attention_gain <= 0.0 || spec.noise_scale < 0.0) {
    throw ConfigError("planted spec: margin and gain must be positive, noise non-negative");
  }

  ModelParams p = ModelParams::zeros(c);
  for (int t = 0; t < vocab; ++t) p.tok_emb(t, t) = 1.0f;
  for (int s = 0; s < c.max_seq_len; ++s) p.pos_emb(s, vocab + s) = 1.0f;
  p.final_norm.setOnes();

  Rng rng(derive_seed(c.seed, {0x9A47}));
  const int junk = c.d_model - scratch;
  const double write_scale = spec.noise_scale / std::sqrt(static_cast<double>(junk));
  for (int l = 0; l < c.n_layers; ++l) {
    auto& L = p.layers[l];
    L.attn_norm.setOnes();
    L.mlp_norm.setOnes();
    for (int h = 0; h < c.n_heads; ++h) {
      if (HeadId{l, h} == spec.head) continue;
      const int col = h * c.d_head;
      for (auto* w : {&L.wq, &L.wk, &L.wv}) {
        Mat<float> block(c.d_model, c.d_head);
        fill_noise(block, rng, spec.noise_scale);
        w->block(0, col, c.d_model, c.d_head) = block;
      }
      Mat<float> out(c.d_head, junk);
      fill_noise(out, rng, write_scale);
      L.wo.block(col, scratch, c.d_head, junk) = out;
    }
    Mat<float> w_in(c.d_model, c.d_mlp);
    fill_noise(w_in, rng, spec.noise_scale);
    L.w_in = w_in;
    Mat<float> w_out(c.d_mlp, junk);
    fill_noise(w_out, rng, write_scale);
    L.w_out.block(0, scratch, c.d_mlp, junk) = w_out;
  }

  // The planted head: query from the key token at the final position, keys
  // from the option-slot positions, values copy token identity into the register.
  auto& P = p.layers[spec.head.layer];
  const int col = spec.head.head * c.d_head;
  const auto gain = static_cast<float>(spec.attention_gain);
  for (int k = 0; k < v::kChoices; ++k) {
    const int slot = ((k + spec.key_shift) % v::kChoices + v::kChoices) % v::kChoices;
    P.wq(v::kKeyBase + k, col + slot) = gain;
    P.wk(vocab + tasks::option_position(slot), col + slot) = gain;
  }
  for (int t = 0; t < vocab; ++t) {
    P.wv(t, col + t) = 1.0f;
    P.wo(col + t, reg + t) = 1.0f;
    p.unembed(reg + t, t) = 1.0f;
  }

  // Rescale the unembedding so the answer logit leads every other logit by the target margin.
  double gap = 0.0;
  {
    const CompiledModel m(p);
    for (int key = 0; key < v::kChoices; ++key) {
      const auto prompt = calibration_prompt(key);
      const int slot = ((key + spec.key_shift) % v::kChoices + v::kChoices) % v::kChoices;
      const int answer = prompt[tasks::option_position(slot)];
      const MatD logits = m.forward(prompt).logits;
      const auto last = logits.row(logits.rows() - 1);
      double runner_up = -INFINITY;
      for (int t = 0; t < vocab; ++t)
        if (t != answer) runner_up = std::max(runner_up, last(t));
      gap += (last(answer) - runner_up) / v::kChoices;
    }
  }
  if (!(gap > 0.0)) throw ConfigError("planted spec: construction does not separate the answer");
  p.unembed *= static_cast<float>(spec.logit_margin / gap);

  return PlantedModel{std::move(p), HeadSet{spec.head}};
}

}  // namespace circuitlab::model
