#include "circuitlab/training.hpp"

#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/parallel.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/scoring.hpp"

namespace circuitlab::training {

using model::CompiledModel;
using model::MatD;

// ---- optimizer ----

Optimizer::Optimizer(OptimizerConfig config, double learning_rate) : config_(config), lr_(learning_rate) {
  if (!(learning_rate >= 0.0)) throw ConfigError("optimizer: learning rate must be >= 0");
  if (config.clip_norm < 0.0) throw ConfigError("optimizer: clip_norm must be >= 0");
}

void Optimizer::step(ModelParams& params, const ParamGrads& grads) {
  ++t_;
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(model::squared_norm(grads));
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  auto p = params.tensors();
  const auto g = grads.tensors();
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t k = 0; k < p[i].data.size(); ++k)
        p[i].data[k] = static_cast<float>(static_cast<double>(p[i].data[k]) - lr_ * scale * g[i].data[k]);
    return;
  }
  if (!m_) {
    m_ = ParamGrads::zeros(params.config);
    v_ = ParamGrads::zeros(params.config);
  }
  auto m = m_->tensors();
  auto v = v_->tensors();
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t k = 0; k < p[i].data.size(); ++k) {
      const double gk = scale * g[i].data[k];
      m[i].data[k] = b1 * m[i].data[k] + (1.0 - b1) * gk;
      v[i].data[k] = b2 * v[i].data[k] + (1.0 - b2) * gk * gk;
      const double update = lr_ * (m[i].data[k] / c1) / (std::sqrt(v[i].data[k] / c2) + config_.epsilon);
      p[i].data[k] = static_cast<float>(static_cast<double>(p[i].data[k]) - update);
    }
  }
}

// ---- config I/O ----

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", c.kind == OptimizerKind::kSgd ? "sgd" : "adam"},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon},
       {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  const std::string kind = j.value("kind", std::string("sgd"));
  if (kind == "sgd") {
    c.kind = OptimizerKind::kSgd;
  } else if (kind == "adam") {
    c.kind = OptimizerKind::kAdam;
  } else {
    throw ConfigError("optimizer kind must be 'sgd' or 'adam', got '" + kind + "'");
  }
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
}

void to_json(nlohmann::json& j, const SftConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"optimizer", c.optimizer}};
  if (c.regularization) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : c.regularization->heads) heads.push_back({h.layer, h.head});
    j["regularization"] = {{"heads", heads}, {"strength", c.regularization->strength}};
  }
}

void from_json(const nlohmann::json& j, SftConfig& c) {
  c = SftConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  if (j.contains("regularization") && !j.at("regularization").is_null()) {
    const auto& r = j.at("regularization");
    CircuitRegularization reg;
    reg.strength = r.value("strength", 0.0);
    for (const auto& h : r.value("heads", nlohmann::json::array())) {
      const auto v = h.get<std::vector<int>>();
      if (v.size() != 2) throw ConfigError("regularization head must be [layer, head]");
      reg.heads.insert({v[0], v[1]});
    }
    c.regularization = reg;
  }
}

void to_json(nlohmann::json& j, const RlConfig& c) {
  j = {{"group_size", c.group_size},
       {"refinement_steps", c.refinement_steps},
       {"learning_rate", c.learning_rate},
       {"temperature", c.temperature},
       {"clip_epsilon", c.clip_epsilon},
       {"iterations", c.iterations},
       {"seed", c.seed},
       {"kl_penalty_weight", c.kl_penalty_weight},
       {"prompts_per_iteration", c.prompts_per_iteration},
       {"normalize_std", c.normalize_std},
       {"zero_reward_patience", c.zero_reward_patience},
       {"block_size", c.block_size},
       {"optimizer", c.optimizer}};
}

void from_json(const nlohmann::json& j, RlConfig& c) {
  c = RlConfig{};
  c.group_size = j.value("group_size", c.group_size);
  c.refinement_steps = j.value("refinement_steps", c.refinement_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.temperature = j.value("temperature", c.temperature);
  c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
  c.iterations = j.value("iterations", c.iterations);
  c.seed = j.value("seed", c.seed);
  c.kl_penalty_weight = j.value("kl_penalty_weight", c.kl_penalty_weight);
  c.prompts_per_iteration = j.value("prompts_per_iteration", c.prompts_per_iteration);
  c.normalize_std = j.value("normalize_std", c.normalize_std);
  c.zero_reward_patience = j.value("zero_reward_patience", c.zero_reward_patience);
  c.block_size = j.value("block_size", c.block_size);
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
}

nlohmann::json to_json(const TraceRecord& r) {
  nlohmann::json j = {{"step", r.step}, {"loss", r.loss}, {"nts", r.nts}};
  j["mean_reward"] = r.mean_reward ? nlohmann::json(*r.mean_reward) : nlohmann::json(nullptr);
  j["checkpoint_path"] = r.checkpoint_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.checkpoint_path);
  return j;
}

// ---- SFT ----

namespace {

void check_items(std::span<const tasks::TaskItem> items, const model::ModelConfig& c, const char* what) {
  if (items.empty()) throw ConfigError(fmt::format("{}: no items", what));
  for (const auto& it : items) {
    std::size_t longest = 0;
    for (const auto& ch : it.choices) longest = std::max(longest, ch.size());
    if (static_cast<int>(it.prompt.size() + longest + 1) > c.max_seq_len) {
      throw ConfigError(fmt::format("{}: item '{}' does not fit max_seq_len {}", what, it.id, c.max_seq_len));
    }
  }
}

double mean_cross_entropy(const CompiledModel& m, std::span<const tasks::TaskItem> items) {
  std::vector<double> ce(items.size());
  parallel_for(items.size(), [&](std::size_t i) { ce[i] = scoring::answer_cross_entropy(m, items[i]); });
  double s = 0.0;
  for (double v : ce) s += v;
  return s / static_cast<double>(items.size());
}

// Sums per-item gradients in index order.
ParamGrads reduce(const model::ModelConfig& c, std::vector<std::optional<ParamGrads>>& parts) {
  ParamGrads total = ParamGrads::zeros(c);
  for (auto& g : parts)
    if (g) model::accumulate(total, *g);
  return total;
}

}  // namespace

TrainResult train_sft_items(const ModelParams& params, std::span<const tasks::TaskItem> items,
                            std::span<const tasks::TaskItem> eval_items, const SftConfig& config,
                            const ModelParams* reference) {
  const auto& c = params.config;
  if (config.epochs < 0) throw ConfigError("sft: epochs must be >= 0");
  if (config.batch_size < 1) throw ConfigError("sft: batch_size must be >= 1");
  check_items(items, c, "sft");
  if (eval_items.empty()) eval_items = items;

  std::optional<CompiledModel> ref;
  std::vector<model::ActivationCache> ref_cache;
  std::vector<model::HeadId> reg_heads;
  double strength = 0.0;
  if (config.regularization) {
    const auto& reg = *config.regularization;
    if (reg.heads.empty()) throw ConfigError("circuit regularization: empty head set");
    for (const auto& h : reg.heads)
      if (!model::contains(c, h)) throw ConfigError("circuit regularization: head " + model::to_string(h) + " outside model");
    if (!(reg.strength >= 0.0)) throw ConfigError("circuit regularization: strength must be >= 0");
    if (!reference) throw ConfigError("circuit regularization: reference parameters required");
    if (!reference->config.same_architecture(c)) throw ConfigError("circuit regularization: reference config mismatch");
    reg_heads.assign(reg.heads.begin(), reg.heads.end());
    strength = reg.strength;
    ref.emplace(*reference);
    ref_cache.resize(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
      const auto input = scoring::scoring_input(items[i].prompt, scoring::sft_answer(items[i]));
      ref_cache[i] = *ref->forward(input, nullptr, true).cache;
    });
  }

  TrainResult out{params, {}};
  ModelParams& p = out.params;
  Optimizer opt(config.optimizer, config.learning_rate);
  {
    const CompiledModel m(p);
    out.trace.initial = {0, mean_cross_entropy(m, items), std::nullopt, scoring::accuracy(m, eval_items), {}, {}};
  }

  std::vector<std::size_t> order(items.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {0x5F7, static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      const CompiledModel m(p);
      std::vector<std::optional<ParamGrads>> parts(end - start);
      std::vector<double> losses(end - start);
      parallel_for(end - start, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        const auto& item = items[idx];
        const auto answer = scoring::sft_answer(item);
        const auto input = scoring::scoring_input(item.prompt, answer);
        model::LossSpec loss;
        const double w = inv_b / static_cast<double>(answer.size());
        for (std::size_t t = 0; t < answer.size(); ++t)
          loss.nll.push_back({static_cast<int>(item.prompt.size() - 1 + t), answer[t], w});
        if (ref) loss.anchor = model::ActivationAnchor{reg_heads, &ref_cache[idx], strength * inv_b};
        auto g = model::compute_gradients(m, input, nullptr, loss);
        losses[k] = g.loss;
        parts[k] = std::move(g.params);
      });
      double batch_loss = 0.0;
      for (double v : losses) batch_loss += v;
      if (!std::isfinite(batch_loss)) {
        std::string ids;
        for (std::size_t k = start; k < end; ++k) ids += (ids.empty() ? "" : ",") + items[order[k]].id;
        throw NumericError(fmt::format("sft: non-finite loss in epoch {} batch [{}]", epoch, ids));
      }
      opt.step(p, reduce(c, parts));
    }
    const CompiledModel m(p);
    out.trace.checkpoints.push_back(p);
    out.trace.records.push_back({epoch, mean_cross_entropy(m, items), std::nullopt,
                                 scoring::accuracy(m, eval_items),
                                 static_cast<int>(out.trace.checkpoints.size()) - 1, {}});
  }
  return out;
}

TrainResult train_sft(const ModelParams& params, const tasks::TaskSuite& suite, const SftConfig& config) {
  if (config.epochs < 1) throw ConfigError("sft: epochs must be >= 1");
  return train_sft_items(params, suite.new_task, suite.new_task, config);
}

TrainResult train_sft_circuit_reg(const ModelParams& params, const tasks::TaskSuite& suite,
                                  const SftConfig& config, const ModelParams& reference) {
  if (!config.regularization) throw ConfigError("circuit regularization: config has no regularization block");
  if (config.epochs < 1) throw ConfigError("sft: epochs must be >= 1");
  return train_sft_items(params, suite.new_task, suite.new_task, config, &reference);
}

// ---- RL ----

std::vector<double> group_advantages(std::span<const double> rewards, bool normalize_std) {
  if (rewards.size() < 2) throw ConfigError("group_advantages: group size must be >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  std::vector<double> a(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = rewards[i] - mean;
  if (normalize_std) {
    double var = 0.0;
    for (double v : a) var += v * v;
    const double sd = std::sqrt(var / static_cast<double>(a.size()));
    if (sd > 0.0)
      for (double& v : a) v /= sd;
  }
  return a;
}

TrainResult train_rl_items(const ModelParams& params, std::span<const tasks::TaskItem> items,
                           std::span<const tasks::TaskItem> eval_items, const RlConfig& config) {
  const auto& c = params.config;
  if (config.group_size < 2) throw ConfigError("rl: group_size must be >= 2");
  if (config.refinement_steps < 1) throw ConfigError("rl: refinement_steps must be >= 1");
  if (!(config.clip_epsilon > 0.0)) throw ConfigError("rl: clip_epsilon must be > 0");
  if (!(config.kl_penalty_weight >= 0.0)) throw ConfigError("rl: kl_penalty_weight must be >= 0");
  if (!(config.temperature > 0.0)) throw ConfigError("rl: temperature must be > 0");
  if (config.iterations < 0) throw ConfigError("rl: iterations must be >= 0");
  if (config.block_size < 0) throw ConfigError("rl: block_size must be >= 0");
  if (config.prompts_per_iteration < 1 || config.prompts_per_iteration > static_cast<int>(items.size())) {
    throw ConfigError(fmt::format("rl: prompts_per_iteration must be in [1, {}]", items.size()));
  }
  check_items(items, c, "rl");
  if (eval_items.empty()) eval_items = items;

  const int n_prompts = config.prompts_per_iteration;
  const int G = config.group_size;
  const int N = n_prompts * G;
  const double inv_n = 1.0 / N;

  std::optional<CompiledModel> ref;
  if (config.kl_penalty_weight > 0.0) ref.emplace(params);

  TrainResult out{params, {}};
  ModelParams& p = out.params;
  Optimizer opt(config.optimizer, config.learning_rate);
  {
    const CompiledModel m(p);
    out.trace.initial = {0, mean_cross_entropy(m, items), std::nullopt, scoring::accuracy(m, eval_items), {}, {}};
  }

  std::vector<std::size_t> pool(items.size());
  int zero_streak = 0;
  for (int it = 1; it <= config.iterations; ++it) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {0xA11, static_cast<std::uint64_t>(it)}));
    rng.shuffle(std::span<std::size_t>(pool));

    struct Sample {
      const tasks::TaskItem* item;
      std::vector<int> completion;
      std::vector<double> old_logp;
      double reward = 0.0;
      double advantage = 0.0;
    };
    std::vector<Sample> samples(N);
    {
      const CompiledModel old(p);
      parallel_for(N, [&](std::size_t s) {
        const auto j = static_cast<std::uint64_t>(s / G), g = static_cast<std::uint64_t>(s % G);
        Sample& S = samples[s];
        S.item = &items[pool[j]];
        Rng srng(derive_seed(config.seed, {0x5A3, static_cast<std::uint64_t>(it), j, g}));
        model::SampleOptions so;
        so.temperature = config.temperature;
        so.max_new = static_cast<int>(S.item->gold_choice().size()) + 1;
        so.stop_token = tasks::vocab::kEndOfAnswer;
        S.completion = model::sample(old, S.item->prompt, so, srng);
        S.reward = tasks::binary_reward(S.completion, *S.item);
        S.old_logp = model::seq_log_probs(old, S.item->prompt, S.completion);
      });
    }
    double reward_sum = 0.0;
    for (int j = 0; j < n_prompts; ++j) {
      std::vector<double> r(G);
      for (int g = 0; g < G; ++g) r[g] = samples[j * G + g].reward;
      const auto a = group_advantages(r, config.normalize_std);
      for (int g = 0; g < G; ++g) samples[j * G + g].advantage = a[g];
      for (double v : r) reward_sum += v;
    }
    const double mean_reward = reward_sum / N;
    zero_streak = mean_reward == 0.0 ? zero_streak + 1 : 0;
    if (zero_streak > config.zero_reward_patience) {
      throw TrainingError(fmt::format("rl: {} consecutive iterations with zero reward (patience {}) at iteration {}",
                                      zero_streak, config.zero_reward_patience, it));
    }

    double surrogate = 0.0;
    for (int step = 0; step < config.refinement_steps; ++step) {
      const CompiledModel m(p);
      std::vector<std::optional<ParamGrads>> parts(N);
      std::vector<double> losses(N, 0.0);
      parallel_for(N, [&](std::size_t s) {
        const Sample& S = samples[s];
        const auto& prompt = S.item->prompt;
        const std::size_t T = S.completion.size();
        std::vector<double> w(T, S.advantage * inv_n);
        if (step > 0 && S.advantage != 0.0) {
          const auto lp = model::seq_log_probs(m, prompt, S.completion);
          for (std::size_t t = 0; t < T; ++t) {
            const double rho = std::exp(lp[t] - S.old_logp[t]);
            const bool clipped = (S.advantage > 0.0 && rho > 1.0 + config.clip_epsilon) ||
                                 (S.advantage < 0.0 && rho < 1.0 - config.clip_epsilon);
            w[t] = clipped ? 0.0 : S.advantage * rho * inv_n;
          }
        }
        model::LossSpec loss;
        for (std::size_t t = 0; t < T; ++t)
          loss.nll.push_back({static_cast<int>(prompt.size() - 1 + t), S.completion[t], w[t]});
        const auto input = scoring::scoring_input(prompt, S.completion);
        if (ref) {
          model::KlAnchor kl;
          const MatD ref_lp = model::log_softmax(ref->forward(input).logits);
          kl.reference_log_probs.resize(static_cast<Eigen::Index>(T), c.vocab_size);
          for (std::size_t t = 0; t < T; ++t) {
            kl.positions.push_back(static_cast<int>(prompt.size() - 1 + t));
            kl.reference_log_probs.row(static_cast<Eigen::Index>(t)) = ref_lp.row(kl.positions.back());
          }
          kl.weight = config.kl_penalty_weight * inv_n;
          loss.kl = std::move(kl);
        } else if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) {
          return;
        }
        auto g = model::compute_gradients(m, input, nullptr, loss);
        losses[s] = g.loss;
        parts[s] = std::move(g.params);
      });
      if (step == 0)
        for (double v : losses) surrogate += v;
      opt.step(p, reduce(c, parts));
    }

    const CompiledModel m(p);
    TraceRecord rec{it, surrogate, mean_reward, scoring::accuracy(m, eval_items), std::nullopt, {}};
    const bool block_end = config.block_size > 0 ? (it % config.block_size == 0 || it == config.iterations)
                                                 : it == config.iterations;
    if (block_end) {
      out.trace.checkpoints.push_back(p);
      rec.checkpoint = static_cast<int>(out.trace.checkpoints.size()) - 1;
    }
    out.trace.records.push_back(rec);
  }
  return out;
}

TrainResult train_rl_drgrpo(const ModelParams& params, const tasks::TaskSuite& suite, const RlConfig& config) {
  return train_rl_items(params, suite.new_task, suite.new_task, config);
}

// ---- drift ----

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ConfigError("kl_divergence: distributions differ in size or are empty");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw ConfigError("kl_divergence: negative probability");
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return INFINITY;
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

double kl_drift(const ModelParams& base, const ModelParams& theta, std::span<const tasks::TaskItem> items) {
  if (!base.config.same_architecture(theta.config)) throw ConfigError("kl_drift: model configs differ");
  if (items.empty()) throw ConfigError("kl_drift: no items");
  const CompiledModel mb(base), mt(theta);
  std::vector<double> sums(items.size(), 0.0);
  std::vector<int> counts(items.size(), 0);
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& item = items[i];
    const auto& gold = item.gold_choice();
    const auto input = scoring::scoring_input(item.prompt, gold);
    const MatD lb = model::log_softmax(mb.forward(input).logits);
    const MatD lt = model::log_softmax(mt.forward(input).logits);
    for (std::size_t t = 0; t < gold.size(); ++t) {
      const auto r = static_cast<Eigen::Index>(item.prompt.size() - 1 + t);
      const auto pb = lb.row(r).array().exp();
      sums[i] += (pb * (lb.row(r).array() - lt.row(r).array())).sum();
      ++counts[i];
    }
  });
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    s += sums[i];
    n += counts[i];
  }
  return std::max(0.0, s / n);
}

double activation_drift(const ModelParams& base, const ModelParams& theta, std::span<const tasks::TaskItem> items,
                        const model::HeadSet& heads) {
  if (!base.config.same_architecture(theta.config)) throw ConfigError("activation_drift: model configs differ");
  if (items.empty() || heads.empty()) throw ConfigError("activation_drift: no items or heads");
  const CompiledModel mb(base), mt(theta);
  std::vector<double> per_item(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto cb = *mb.forward(items[i].prompt, nullptr, true).cache;
    const auto ct = *mt.forward(items[i].prompt, nullptr, true).cache;
    double s = 0.0;
    for (const auto& h : heads) s += (ct.head(h) - cb.head(h)).squaredNorm();
    per_item[i] = s / static_cast<double>(items[i].prompt.size());
  });
  double s = 0.0;
  for (double v : per_item) s += v;
  return s / static_cast<double>(items.size() * heads.size());
}

}  // namespace circuitlab::training
