#include "circuitlab/model.hpp"

#include <cmath>
#include <cstring>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/rng.hpp"

namespace circuitlab::model {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 ||
      max_seq_len < 1) {
    throw ConfigError("model config: all counts must be >= 1");
  }
  if (d_model != n_heads * d_head) {
    throw ConfigError(fmt::format("model config: d_model ({}) != n_heads ({}) * d_head ({})",
                                  d_model, n_heads, d_head));
  }
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model &&
         d_head == o.d_head && d_mlp == o.d_mlp && vocab_size == o.vocab_size &&
         max_seq_len == o.max_seq_len;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                     {"d_model", c.d_model},   {"d_head", c.d_head},
                     {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_head = j.value("d_head", c.d_model / c.n_heads);
  c.d_mlp = j.value("d_mlp", d.d_mlp);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
}

int flat_index(const ModelConfig& config, HeadId id) { return id.layer * config.n_heads + id.head; }

HeadId head_at(const ModelConfig& config, int flat) {
  return HeadId{flat / config.n_heads, flat % config.n_heads};
}

bool contains(const ModelConfig& config, HeadId id) {
  return id.layer >= 0 && id.layer < config.n_layers && id.head >= 0 && id.head < config.n_heads;
}

std::vector<HeadId> all_heads(const ModelConfig& config) {
  std::vector<HeadId> out;
  out.reserve(config.total_heads());
  for (int l = 0; l < config.n_layers; ++l)
    for (int h = 0; h < config.n_heads; ++h) out.push_back({l, h});
  return out;
}

std::string to_string(HeadId id) { return fmt::format("L{}H{}", id.layer, id.head); }

template <class S>
Weights<S> Weights<S>::zeros(const ModelConfig& c) {
  c.validate();
  Weights w;
  w.config = c;
  const int hk = c.n_heads * c.d_head;
  w.tok_emb = Mat<S>::Zero(c.vocab_size, c.d_model);
  w.pos_emb = Mat<S>::Zero(c.max_seq_len, c.d_model);
  w.layers.resize(c.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = Vec<S>::Zero(c.d_model);
    l.wq = Mat<S>::Zero(c.d_model, hk);
    l.wk = Mat<S>::Zero(c.d_model, hk);
    l.wv = Mat<S>::Zero(c.d_model, hk);
    l.wo = Mat<S>::Zero(hk, c.d_model);
    l.mlp_norm = Vec<S>::Zero(c.d_model);
    l.w_in = Mat<S>::Zero(c.d_model, c.d_mlp);
    l.b_in = Vec<S>::Zero(c.d_mlp);
    l.w_out = Mat<S>::Zero(c.d_mlp, c.d_model);
    l.b_out = Vec<S>::Zero(c.d_model);
  }
  w.final_norm = Vec<S>::Zero(c.d_model);
  w.unembed = Mat<S>::Zero(c.d_model, c.vocab_size);
  return w;
}

template <class S>
template <class T>
Weights<T> Weights<S>::cast() const {
  Weights<T> out;
  out.config = config;
  out.tok_emb = tok_emb.template cast<T>();
  out.pos_emb = pos_emb.template cast<T>();
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    auto& d = out.layers[i];
    d.attn_norm = s.attn_norm.template cast<T>();
    d.wq = s.wq.template cast<T>();
    d.wk = s.wk.template cast<T>();
    d.wv = s.wv.template cast<T>();
    d.wo = s.wo.template cast<T>();
    d.mlp_norm = s.mlp_norm.template cast<T>();
    d.w_in = s.w_in.template cast<T>();
    d.b_in = s.b_in.template cast<T>();
    d.w_out = s.w_out.template cast<T>();
    d.b_out = s.b_out.template cast<T>();
  }
  out.final_norm = final_norm.template cast<T>();
  out.unembed = unembed.template cast<T>();
  return out;
}

namespace {

template <class S, class W>
std::vector<TensorRef<S>> collect(W& w) {
  std::vector<TensorRef<S>> out;
  auto add_mat = [&](std::string name, auto& m) {
    out.push_back({std::move(name), {static_cast<int>(m.rows()), static_cast<int>(m.cols())},
                   std::span<S>(m.data(), static_cast<std::size_t>(m.size()))});
  };
  auto add_vec = [&](std::string name, auto& v) {
    out.push_back({std::move(name), {static_cast<int>(v.size())},
                   std::span<S>(v.data(), static_cast<std::size_t>(v.size()))});
  };
  add_mat("tok_emb", w.tok_emb);
  add_mat("pos_emb", w.pos_emb);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = fmt::format("layers.{}.", i);
    add_vec(p + "attn_norm", l.attn_norm);
    add_mat(p + "wq", l.wq);
    add_mat(p + "wk", l.wk);
    add_mat(p + "wv", l.wv);
    add_mat(p + "wo", l.wo);
    add_vec(p + "mlp_norm", l.mlp_norm);
    add_mat(p + "w_in", l.w_in);
    add_vec(p + "b_in", l.b_in);
    add_mat(p + "w_out", l.w_out);
    add_vec(p + "b_out", l.b_out);
  }
  add_vec("final_norm", w.final_norm);
  add_mat("unembed", w.unembed);
  return out;
}

}  // namespace

template <class S>
std::vector<TensorRef<S>> Weights<S>::tensors() {
  return collect<S>(*this);
}

template <class S>
std::vector<TensorRef<const S>> Weights<S>::tensors() const {
  return collect<const S>(*this);
}

template <class S>
std::size_t Weights<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.data.size();
  return n;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;

ModelParams init_params(const ModelConfig& c) {
  ModelParams w = ModelParams::zeros(c);
  Rng rng(derive_seed(c.seed, {0x1A17}));
  auto fill = [&](auto& m, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(stddev * rng.normal());
  };
  const double residual_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
  fill(w.tok_emb, 1.0);
  fill(w.pos_emb, 0.5);
  for (auto& l : w.layers) {
    l.attn_norm.setOnes();
    fill(l.wq, 1.0 / std::sqrt(c.d_model));
    fill(l.wk, 1.0 / std::sqrt(c.d_model));
    fill(l.wv, 1.0 / std::sqrt(c.d_model));
    fill(l.wo, residual_scale / std::sqrt(c.n_heads * c.d_head));
    l.mlp_norm.setOnes();
    fill(l.w_in, 1.0 / std::sqrt(c.d_model));
    fill(l.w_out, residual_scale / std::sqrt(c.d_mlp));
  }
  w.final_norm.setOnes();
  fill(w.unembed, 1.0 / std::sqrt(c.d_model));
  return w;
}

bool all_finite(const ModelParams& params) {
  for (const auto& t : params.tensors())
    for (float v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config)) return false;
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].data.size() != tb[i].data.size()) return false;
    if (std::memcmp(ta[i].data.data(), tb[i].data.data(), ta[i].data.size_bytes()) != 0) return false;
  }
  return true;
}

double squared_norm(const ParamGrads& grads) {
  double s = 0.0;
  for (const auto& t : grads.tensors())
    for (double v : t.data) s += v * v;
  return s;
}

void accumulate(ParamGrads& a, const ParamGrads& b, double scale) {
  auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t k = 0; k < ta[i].data.size(); ++k) ta[i].data[k] += scale * tb[i].data[k];
}

}  // namespace circuitlab::model
