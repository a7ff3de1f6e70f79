#include "circuitlab/transformer.hpp"

#include <cmath>
#include <numbers>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"

namespace circuitlab::model {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

// n = x / rms(x) * gain, row-wise.
MatD rms_norm(const MatD& x, const VecD& gain, VecD& rms) {
  const auto d = static_cast<double>(x.cols());
  rms.resize(x.rows());
  MatD out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    rms(i) = std::sqrt(x.row(i).squaredNorm() / d + kNormEps);
    out.row(i) = x.row(i).cwiseProduct(gain.transpose()) / rms(i);
  }
  return out;
}

MatD rms_norm_backward(const MatD& x, const VecD& rms, const VecD& gain, const MatD& dn, VecD* dgain) {
  const auto d = static_cast<double>(x.cols());
  MatD dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double r = rms(i);
    if (dgain) *dgain += (dn.row(i).cwiseProduct(x.row(i)) / r).transpose();
    const auto gh = dn.row(i).cwiseProduct(gain.transpose());
    const double dot = gh.dot(x.row(i));
    dx.row(i) = gh / r - x.row(i) * (dot / (d * r * r * r));
  }
  return dx;
}

std::vector<const PatchRule*> rules_for_layer(const PatchPlan* plan, int layer) {
  std::vector<const PatchRule*> out;
  if (!plan) return out;
  for (const auto& r : plan->rules())
    if (r.head.layer == layer) out.push_back(&r);
  return out;
}

void check_finite(const MatD& m, const char* what) {
  if (!m.allFinite()) throw NumericError(fmt::format("non-finite value in {} (corrupted parameters?)", what));
}

}  // namespace

MatD ActivationCache::head(HeadId id) const { return head(id, 0, length()); }

MatD ActivationCache::head(HeadId id, int begin, int end) const {
  return z_.at(id.layer).block(begin, id.head * d_head_, end - begin, d_head_);
}

CompiledModel::CompiledModel(const ModelParams& params) : w_(params.cast<double>()) {
  w_.config.validate();
}

void CompiledModel::check_tokens(std::span<const int> tokens) const {
  const auto& c = w_.config;
  if (tokens.empty()) throw ConfigError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq_len) {
    throw ConfigError(fmt::format("forward: sequence length {} exceeds max_seq_len {}", tokens.size(),
                                  c.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw ConfigError(fmt::format("forward: token id {} out of range [0, {})", t, c.vocab_size));
    }
  }
}

ForwardTape CompiledModel::forward_tape(std::span<const int> tokens, const PatchPlan* plan) const {
  check_tokens(tokens);
  const auto& c = w_.config;
  const int len = static_cast<int>(tokens.size());
  if (plan) plan->validate(c, len);
  const int dk = c.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  ForwardTape tape;
  tape.tokens.assign(tokens.begin(), tokens.end());
  tape.layers.resize(c.n_layers);

  MatD x(len, c.d_model);
  for (int p = 0; p < len; ++p) x.row(p) = w_.tok_emb.row(tokens[p]) + w_.pos_emb.row(p);

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& W = w_.layers[l];
    auto& L = tape.layers[l];
    L.x_in = x;
    L.n1 = rms_norm(x, W.attn_norm, L.rms1);
    L.q = L.n1 * W.wq;
    L.k = L.n1 * W.wk;
    L.v = L.n1 * W.wv;
    L.z = MatD::Zero(len, c.n_heads * dk);
    L.attn.resize(c.n_heads);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto qh = L.q.middleCols(h * dk, dk);
      const auto kh = L.k.middleCols(h * dk, dk);
      MatD scores = (qh * kh.transpose()) * scale;
      MatD& a = L.attn[h];
      a = MatD::Zero(len, len);
      for (int i = 0; i < len; ++i) {
        const double mx = scores.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
          a(i, j) = std::exp(scores(i, j) - mx);
          sum += a(i, j);
        }
        a.row(i).head(i + 1) /= sum;
      }
      L.z.middleCols(h * dk, dk) = a * L.v.middleCols(h * dk, dk);
    }
    L.z_patched = L.z;
    for (const PatchRule* r : rules_for_layer(plan, l)) {
      const int col = r->head.head * dk;
      for (int p = r->begin; p < r->end; ++p) {
        auto dst = L.z_patched.block(p, col, 1, dk);
        switch (r->kind) {
          case PatchKind::kSubstitute:
          case PatchKind::kMean:
            dst = r->row(p);
            break;
          case PatchKind::kInterpolate:
            dst = (1.0 - r->coefficient) * L.z.block(p, col, 1, dk) + r->coefficient * r->row(p);
            break;
          case PatchKind::kZero:
            dst.setZero();
            break;
        }
      }
    }
    x += L.z_patched * W.wo;
    L.x_mid = x;
    L.n2 = rms_norm(x, W.mlp_norm, L.rms2);
    L.pre_act = (L.n2 * W.w_in).rowwise() + W.b_in.transpose();
    L.act = L.pre_act.unaryExpr([](double u) { return gelu(u); });
    x += (L.act * W.w_out).rowwise() + W.b_out.transpose();
  }
  tape.x_final = x;
  tape.n_final = rms_norm(x, w_.final_norm, tape.rms_final);
  tape.logits = tape.n_final * w_.unembed;
  check_finite(tape.logits, "forward pass");
  return tape;
}

ForwardResult CompiledModel::forward(std::span<const int> tokens, const PatchPlan* plan, bool capture) const {
  ForwardTape tape = forward_tape(tokens, plan);
  ForwardResult out;
  if (capture) {
    std::vector<MatD> z;
    std::vector<MatD> residual;
    z.reserve(tape.layers.size());
    for (auto& L : tape.layers) {
      z.push_back(std::move(L.z));
      residual.push_back(std::move(L.x_in));
    }
    residual.push_back(std::move(tape.x_final));
    out.cache.emplace(w_.config.d_head, std::move(z), std::move(residual));
  }
  out.logits = std::move(tape.logits);
  return out;
}

void CompiledModel::backward(const ForwardTape& tape, const MatD& dlogits, const std::vector<MatD>* dz_extra,
                             const PatchPlan* plan, ParamGrads* grads,
                             std::vector<double>* coefficient_grads) const {
  const auto& c = w_.config;
  const int len = static_cast<int>(tape.tokens.size());
  const int dk = c.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  if (coefficient_grads && plan) coefficient_grads->assign(plan->rules().size(), 0.0);

  if (grads) grads->unembed.noalias() += tape.n_final.transpose() * dlogits;
  MatD dn = dlogits * w_.unembed.transpose();
  MatD dx = rms_norm_backward(tape.x_final, tape.rms_final, w_.final_norm, dn,
                              grads ? &grads->final_norm : nullptr);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& W = w_.layers[l];
    const auto& L = tape.layers[l];
    auto* G = grads ? &grads->layers[l] : nullptr;

    // MLP block.
    if (G) {
      G->w_out.noalias() += L.act.transpose() * dx;
      G->b_out += dx.colwise().sum().transpose();
    }
    MatD dpre = (dx * W.w_out.transpose()).cwiseProduct(L.pre_act.unaryExpr([](double u) { return gelu_grad(u); }));
    if (G) {
      G->w_in.noalias() += L.n2.transpose() * dpre;
      G->b_in += dpre.colwise().sum().transpose();
    }
    MatD dn2 = dpre * W.w_in.transpose();
    dx += rms_norm_backward(L.x_mid, L.rms2, W.mlp_norm, dn2, G ? &G->mlp_norm : nullptr);

    // Attention block.
    if (G) G->wo.noalias() += L.z_patched.transpose() * dx;
    const MatD dzp = dx * W.wo.transpose();
    MatD dz = dzp;
    if (plan) {
      const auto& rules = plan->rules();
      for (std::size_t ri = 0; ri < rules.size(); ++ri) {
        const PatchRule& r = rules[ri];
        if (r.head.layer != l) continue;
        const int col = r.head.head * dk;
        for (int p = r.begin; p < r.end; ++p) {
          const auto g = dzp.row(p).segment(col, dk);
          if (r.kind == PatchKind::kInterpolate) {
            if (coefficient_grads) (*coefficient_grads)[ri] += g.dot(r.row(p) - L.z.row(p).segment(col, dk));
            dz.block(p, col, 1, dk) = (1.0 - r.coefficient) * g;
          } else {
            dz.block(p, col, 1, dk).setZero();
          }
        }
      }
    }
    if (dz_extra) dz += (*dz_extra)[l];

    MatD dq = MatD::Zero(len, c.n_heads * dk);
    MatD dkm = MatD::Zero(len, c.n_heads * dk);
    MatD dv = MatD::Zero(len, c.n_heads * dk);
    for (int h = 0; h < c.n_heads; ++h) {
      const MatD& a = L.attn[h];
      const auto dzh = dz.middleCols(h * dk, dk);
      dv.middleCols(h * dk, dk).noalias() = a.transpose() * dzh;
      const MatD da = dzh * L.v.middleCols(h * dk, dk).transpose();
      MatD ds = a.cwiseProduct(da);
      const VecD row_dot = ds.rowwise().sum();
      ds -= a.cwiseProduct(row_dot.replicate(1, len));
      dq.middleCols(h * dk, dk).noalias() = (ds * L.k.middleCols(h * dk, dk)) * scale;
      dkm.middleCols(h * dk, dk).noalias() = (ds.transpose() * L.q.middleCols(h * dk, dk)) * scale;
    }
    if (G) {
      G->wq.noalias() += L.n1.transpose() * dq;
      G->wk.noalias() += L.n1.transpose() * dkm;
      G->wv.noalias() += L.n1.transpose() * dv;
    }
    MatD dn1 = dq * W.wq.transpose() + dkm * W.wk.transpose() + dv * W.wv.transpose();
    dx += rms_norm_backward(L.x_in, L.rms1, W.attn_norm, dn1, G ? &G->attn_norm : nullptr);
  }

  if (grads) {
    for (int p = 0; p < len; ++p) {
      grads->tok_emb.row(tape.tokens[p]) += dx.row(p);
      grads->pos_emb.row(p) += dx.row(p);
    }
  }
}

MatD log_softmax(const MatD& logits) {
  MatD out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

ForwardResult forward(const ModelParams& params, std::span<const int> tokens, const PatchPlan* plan,
                      bool capture) {
  return CompiledModel(params).forward(tokens, plan, capture);
}

GradientResult compute_gradients(const CompiledModel& model, std::span<const int> tokens, const PatchPlan* plan,
                                 const LossSpec& loss, GradientTargets targets) {
  const auto& c = model.config();
  const ForwardTape tape = model.forward_tape(tokens, plan);
  const int len = static_cast<int>(tokens.size());
  const MatD logp = log_softmax(tape.logits);

  GradientResult result;
  MatD dlogits = MatD::Zero(len, c.vocab_size);
  for (const auto& t : loss.nll) {
    if (t.position < 0 || t.position >= len || t.token < 0 || t.token >= c.vocab_size) {
      throw ConfigError(fmt::format("loss target (position {}, token {}) out of range", t.position, t.token));
    }
    if (t.weight == 0.0) continue;
    result.loss -= t.weight * logp(t.position, t.token);
    dlogits.row(t.position) += t.weight * logp.row(t.position).array().exp().matrix();
    dlogits(t.position, t.token) -= t.weight;
  }
  if (loss.kl) {
    const auto& kl = *loss.kl;
    for (std::size_t i = 0; i < kl.positions.size(); ++i) {
      const int pos = kl.positions[i];
      const auto lp = logp.row(pos).array();
      const auto p = lp.exp();
      const auto diff = lp - kl.reference_log_probs.row(static_cast<Eigen::Index>(i)).array();
      const double value = (p * diff).sum();
      result.loss += kl.weight * value;
      dlogits.row(pos).array() += kl.weight * p * (diff - value);
    }
  }

  std::vector<MatD> dz_extra;
  if (loss.anchor) {
    const auto& an = *loss.anchor;
    if (!an.reference || an.reference->length() != len) {
      throw ConfigError("activation anchor: reference cache missing or of a different length");
    }
    dz_extra.assign(c.n_layers, MatD::Zero(len, c.n_heads * c.d_head));
    for (const HeadId& h : an.heads) {
      if (!contains(c, h)) throw ConfigError("activation anchor: head " + to_string(h) + " outside model");
      const MatD diff = tape.layers[h.layer].z.middleCols(h.head * c.d_head, c.d_head) - an.reference->head(h);
      result.loss += an.weight / len * diff.squaredNorm();
      dz_extra[h.layer].middleCols(h.head * c.d_head, c.d_head) += (2.0 * an.weight / len) * diff;
    }
  }

  if (!std::isfinite(result.loss)) throw NumericError("non-finite loss");
  if (targets.params) result.params = ParamGrads::zeros(c);
  model.backward(tape, dlogits, loss.anchor ? &dz_extra : nullptr, plan,
                 targets.params ? &*result.params : nullptr,
                 targets.patch_coefficients ? &result.coefficient_grads : nullptr);
  if (result.params) {
    for (const auto& t : result.params->tensors())
      for (double v : t.data)
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in " + t.name);
  }
  for (double g : result.coefficient_grads)
    if (!std::isfinite(g)) throw NumericError("non-finite patch-coefficient gradient");
  return result;
}

std::vector<double> seq_log_probs(const CompiledModel& model, std::span<const int> prompt,
                                  std::span<const int> completion, const PatchPlan* plan) {
  if (prompt.empty()) throw ConfigError("seq_log_probs: empty prompt");
  if (completion.empty()) throw ConfigError("seq_log_probs: empty completion");
  const std::size_t total = prompt.size() + completion.size();
  if (static_cast<int>(total) > model.config().max_seq_len) {
    throw ConfigError(fmt::format("seq_log_probs: length {} exceeds max_seq_len {}", total,
                                  model.config().max_seq_len));
  }
  std::vector<int> input(prompt.begin(), prompt.end());
  input.insert(input.end(), completion.begin(), completion.end() - 1);
  const MatD logp = log_softmax(model.forward(input, plan).logits);
  std::vector<double> out(completion.size());
  for (std::size_t i = 0; i < completion.size(); ++i) {
    out[i] = logp(static_cast<Eigen::Index>(prompt.size() - 1 + i), completion[i]);
  }
  return out;
}

std::vector<double> seq_log_probs(const ModelParams& params, std::span<const int> prompt,
                                  std::span<const int> completion) {
  return seq_log_probs(CompiledModel(params), prompt, completion);
}

double geometric_mean_prob(std::span<const double> log_probs) {
  if (log_probs.empty()) throw ConfigError("geometric_mean_prob: empty log-probability list");
  double sum = 0.0;
  for (double v : log_probs) {
    if (!std::isfinite(v) || v > 0.0) {
      throw ConfigError(fmt::format("geometric_mean_prob: invalid log-probability {}", v));
    }
    sum += v;
  }
  return std::exp(sum / static_cast<double>(log_probs.size()));
}

std::vector<int> sample(const CompiledModel& model, std::span<const int> prompt, const SampleOptions& options,
                        Rng& rng) {
  const auto& c = model.config();
  if (!options.greedy && !(options.temperature > 0.0)) {
    throw ConfigError("sample: temperature must be positive");
  }
  if (prompt.empty()) throw ConfigError("sample: empty prompt");
  if (static_cast<int>(prompt.size()) + options.max_new > c.max_seq_len) {
    throw ConfigError(fmt::format("sample: prompt {} + max_new {} exceeds max_seq_len {}", prompt.size(),
                                  options.max_new, c.max_seq_len));
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int step = 0; step < options.max_new; ++step) {
    const MatD logits = model.forward(seq).logits;
    const auto last = logits.row(logits.rows() - 1);
    int next = 0;
    if (options.greedy) {
      Eigen::Index best = 0;
      last.maxCoeff(&best);
      next = static_cast<int>(best);
    } else {
      const VecD scaled = last.transpose() / options.temperature;
      const double mx = scaled.maxCoeff();
      const VecD p = (scaled.array() - mx).exp().matrix();
      double u = rng.uniform() * p.sum();
      next = c.vocab_size - 1;
      for (int v = 0; v < c.vocab_size; ++v) {
        u -= p(v);
        if (u < 0.0) {
          next = v;
          break;
        }
      }
    }
    out.push_back(next);
    seq.push_back(next);
    if (options.stop_token && next == *options.stop_token) break;
  }
  return out;
}

}  // namespace circuitlab::model
