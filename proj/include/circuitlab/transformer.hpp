#pragma once

#include <optional>
#include <span>
#include <vector>

#include "circuitlab/model.hpp"
#include "circuitlab/patch.hpp"
#include "circuitlab/rng.hpp"

namespace circuitlab::model {

/// Per-head outputs z captured before the output projection, one
/// (length x n_heads*d_head) matrix per layer, plus the residual stream
/// entering each layer and leaving the last one.
class ActivationCache {
 public:
  ActivationCache() = default;
  ActivationCache(int d_head, std::vector<MatD> z, std::vector<MatD> residual)
      : d_head_(d_head), z_(std::move(z)), residual_(std::move(residual)) {}

  int length() const { return z_.empty() ? 0 : static_cast<int>(z_.front().rows()); }
  int n_layers() const { return static_cast<int>(z_.size()); }
  /// z for one head, (length x d_head).
  MatD head(HeadId id) const;
  /// z for one head over [begin, end).
  MatD head(HeadId id, int begin, int end) const;
  const MatD& layer(int l) const { return z_.at(l); }
  /// Residual stream entering layer l; index n_layers is the final stream.
  const MatD& residual(int l) const { return residual_.at(l); }

 private:
  int d_head_ = 0;
  std::vector<MatD> z_;
  std::vector<MatD> residual_;
};

struct ForwardResult {
  MatD logits;  // length x vocab
  std::optional<ActivationCache> cache;
};

/// Intermediates of one forward pass, kept for reverse-mode differentiation.
struct ForwardTape {
  struct Layer {
    MatD x_in;
    VecD rms1;
    MatD n1, q, k, v;
    std::vector<MatD> attn;  // per head, length x length
    MatD z, z_patched;
    MatD x_mid;
    VecD rms2;
    MatD n2, pre_act, act;
  };
  std::vector<int> tokens;
  std::vector<Layer> layers;
  MatD x_final;
  VecD rms_final;
  MatD n_final;
  MatD logits;
};

/// One weighted negative log-likelihood term: weight * -log p(token | tokens[0..position]).
struct TokenTarget {
  int position = 0;
  int token = 0;
  double weight = 1.0;
};

/// weight * (1/length) * sum over positions and heads of ||z_h - reference_h||^2.
struct ActivationAnchor {
  std::vector<HeadId> heads;
  const ActivationCache* reference = nullptr;
  double weight = 0.0;
};

/// weight * sum over positions of KL(p_model(.|pos) || p_ref(.|pos)), full vocabulary.
struct KlAnchor {
  std::vector<int> positions;
  MatD reference_log_probs;  // positions.size() x vocab
  double weight = 0.0;
};

struct LossSpec {
  std::vector<TokenTarget> nll;
  std::optional<ActivationAnchor> anchor;
  std::optional<KlAnchor> kl;
};

struct GradientTargets {
  bool params = true;
  /// Gradient w.r.t. each PatchPlan rule's interpolation coefficient.
  bool patch_coefficients = false;
};

struct GradientResult {
  double loss = 0.0;
  std::optional<ParamGrads> params;
  std::vector<double> coefficient_grads;  // indexed like PatchPlan::rules()
};

struct SampleOptions {
  double temperature = 1.0;
  int max_new = 8;
  bool greedy = false;
  std::optional<int> stop_token;
};

/// Double-precision compute copy of a ModelParams. Construct once per
/// parameter state and reuse across forward passes.
class CompiledModel {
 public:
  explicit CompiledModel(const ModelParams& params);

  const ModelConfig& config() const { return w_.config; }
  const Weights<double>& weights() const { return w_; }

  ForwardResult forward(std::span<const int> tokens, const PatchPlan* plan = nullptr,
                        bool capture = false) const;
  ForwardTape forward_tape(std::span<const int> tokens, const PatchPlan* plan = nullptr) const;

  /// Reverse pass. `dlogits` is dLoss/dlogits; `dz_extra`, if given, adds
  /// dLoss/dz per layer on the pre-patch head outputs. Either output pointer
  /// may be null.
  void backward(const ForwardTape& tape, const MatD& dlogits, const std::vector<MatD>* dz_extra,
                const PatchPlan* plan, ParamGrads* grads, std::vector<double>* coefficient_grads) const;

 private:
  void check_tokens(std::span<const int> tokens) const;
  Weights<double> w_;
};

/// Row-wise log-softmax in double precision.
MatD log_softmax(const MatD& logits);

ForwardResult forward(const ModelParams& params, std::span<const int> tokens,
                      const PatchPlan* plan = nullptr, bool capture = false);

/// Loss value and requested gradients for `loss` evaluated on one sequence.
GradientResult compute_gradients(const CompiledModel& model, std::span<const int> tokens,
                                 const PatchPlan* plan, const LossSpec& loss,
                                 GradientTargets targets = {});

/// log P(completion_i | prompt, completion_<i) for every completion token.
std::vector<double> seq_log_probs(const CompiledModel& model, std::span<const int> prompt,
                                  std::span<const int> completion, const PatchPlan* plan = nullptr);
std::vector<double> seq_log_probs(const ModelParams& params, std::span<const int> prompt,
                                  std::span<const int> completion);

/// exp(mean(log_probs)): the per-token geometric mean probability.
double geometric_mean_prob(std::span<const double> log_probs);

/// Autoregressive sampling. Stops after max_new tokens or once the stop
/// token is emitted (it is kept in the output).
std::vector<int> sample(const CompiledModel& model, std::span<const int> prompt,
                        const SampleOptions& options, Rng& rng);

}  // namespace circuitlab::model
