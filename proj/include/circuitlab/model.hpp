#pragma once

#include <compare>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace circuitlab::model {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using MatD = Mat<double>;
using VecD = Vec<double>;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 64;
  int max_seq_len = 48;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless all counts are positive and d_model = n_heads * d_head.
  void validate() const;
  int total_heads() const { return n_layers * n_heads; }

  /// Equal shapes; the seed is not part of the architecture.
  bool same_architecture(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Attention head coordinate; ordering is layer-major.
struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

using HeadSet = std::set<HeadId>;

int flat_index(const ModelConfig& config, HeadId id);
HeadId head_at(const ModelConfig& config, int flat);
bool contains(const ModelConfig& config, HeadId id);
/// All heads of the config in layer-major order.
std::vector<HeadId> all_heads(const ModelConfig& config);
std::string to_string(HeadId id);

template <class S>
struct LayerWeights {
  Vec<S> attn_norm;  // d_model
  Mat<S> wq;         // d_model x (n_heads * d_head); head h owns columns [h*d_head, (h+1)*d_head)
  Mat<S> wk;
  Mat<S> wv;
  Mat<S> wo;  // (n_heads * d_head) x d_model; head h owns rows [h*d_head, (h+1)*d_head)
  Vec<S> mlp_norm;
  Mat<S> w_in;  // d_model x d_mlp
  Vec<S> b_in;
  Mat<S> w_out;  // d_mlp x d_model
  Vec<S> b_out;
};

/// A named view of one tensor inside a Weights instance.
template <class S>
struct TensorRef {
  std::string name;
  std::vector<int> shape;
  std::span<S> data;
};

/// Every weight of the decoder-only transformer. Float instances are the
/// model of record (ModelParams); double instances hold gradients and the
/// compute copy.
template <class S>
struct Weights {
  ModelConfig config;
  Mat<S> tok_emb;  // vocab x d_model
  Mat<S> pos_emb;  // max_seq_len x d_model
  std::vector<LayerWeights<S>> layers;
  Vec<S> final_norm;
  Mat<S> unembed;  // d_model x vocab

  static Weights zeros(const ModelConfig& config);

  template <class T>
  Weights<T> cast() const;

  /// Tensors in canonical (checkpoint) order.
  std::vector<TensorRef<S>> tensors();
  std::vector<TensorRef<const S>> tensors() const;

  std::size_t parameter_count() const;
};

using ModelParams = Weights<float>;
using ParamGrads = Weights<double>;

/// Seeded random initialization from config.seed.
ModelParams init_params(const ModelConfig& config);

bool all_finite(const ModelParams& params);
bool bit_equal(const ModelParams& a, const ModelParams& b);
double squared_norm(const ParamGrads& grads);
/// a += scale * b, tensor by tensor.
void accumulate(ParamGrads& a, const ParamGrads& b, double scale = 1.0);

}  // namespace circuitlab::model
