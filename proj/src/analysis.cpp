#include "circuitlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/parallel.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/scoring.hpp"

namespace circuitlab::analysis {

using model::CompiledModel;
using model::MatD;

std::string to_string(AblationMode m) { return m == AblationMode::kCounterfactual ? "counterfactual" : "mean"; }

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "counterfactual" || s == "counterfactual-patch") return AblationMode::kCounterfactual;
  if (s == "mean" || s == "mean-ablate") return AblationMode::kMean;
  throw ConfigError("ablation mode must be 'counterfactual' or 'mean', got '" + s + "'");
}

void AnalysisConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("analysis: delta must be in (0, 1)");
  if (eval_items < 1) throw ConfigError("analysis: eval_items must be >= 1");
}

void to_json(nlohmann::json& j, const AnalysisConfig& c) {
  j = {{"delta", c.delta}, {"mode", to_string(c.mode)}, {"eval_items", c.eval_items}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AnalysisConfig& c) {
  c = AnalysisConfig{};
  c.delta = j.value("delta", c.delta);
  if (j.contains("mode")) c.mode = ablation_mode_from_string(j.at("mode").get<std::string>());
  c.eval_items = j.value("eval_items", c.eval_items);
  c.seed = j.value("seed", c.seed);
}

// ---- ablation ----

namespace {

std::vector<MatD> capture_z(const CompiledModel& model, std::span<const int> input) {
  const auto cache = *model.forward(input, nullptr, true).cache;
  std::vector<MatD> z;
  for (int l = 0; l < cache.n_layers(); ++l) z.push_back(cache.layer(l));
  return z;
}

model::PatchPlan replacement_plan(const model::ModelConfig& c, const std::vector<MatD>& z, const HeadSet& heads,
                                  model::PatchKind kind) {
  model::PatchPlan plan;
  const int len = static_cast<int>(z.front().rows());
  for (const auto& h : heads) {
    model::PatchRule r{h, 0, len, kind, 1.0, z[h.layer].middleCols(h.head * c.d_head, c.d_head)};
    plan.add(std::move(r));
  }
  return plan;
}

}  // namespace

Ablation::Ablation(const CompiledModel& model, std::span<const tasks::TaskItem> items)
    : model_(&model), items_(items) {
  if (items.empty()) throw ConfigError("ablation: no items");
}

Ablation::Ablation(const CompiledModel& model, std::span<const tasks::TaskItem> items, AblationMode mode,
                   std::uint64_t seed)
    : Ablation(model, items) {
  mode_ = mode;
  if (mode == AblationMode::kCounterfactual) {
    // Seeded derangement inside each prompt-length group (Sattolo's algorithm).
    std::map<std::size_t, std::vector<int>> groups;
    for (int i = 0; i < static_cast<int>(items.size()); ++i) groups[items[i].prompt.size()].push_back(i);
    partners_.resize(items.size());
    Rng rng(derive_seed(seed, {0xAB1}));
    for (auto& [len, idx] : groups) {
      std::vector<int> perm = idx;
      for (std::size_t k = perm.size(); k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k - 1)]);
      // perm is a single cycle over idx; idx[k] is paired with perm[k].
      for (std::size_t k = 0; k < idx.size(); ++k) partners_[idx[k]] = perm[k];
    }
    build_counterfactual();
  } else {
    build_mean();
  }
}

Ablation Ablation::with_partners(const CompiledModel& model, std::span<const tasks::TaskItem> items,
                                 std::vector<int> partners) {
  Ablation a(model, items);
  if (partners.size() != items.size()) throw ConfigError("ablation: one partner per item required");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (partners[i] < 0 || partners[i] >= static_cast<int>(items.size()) ||
        items[partners[i]].prompt.size() != items[i].prompt.size()) {
      throw ConfigError(fmt::format("ablation: partner {} of item {} invalid", partners[i], i));
    }
  }
  a.partners_ = std::move(partners);
  a.build_counterfactual();
  return a;
}

void Ablation::build_counterfactual() {
  replacement_.resize(items_.size());
  parallel_for(items_.size(), [&](std::size_t i) {
    const auto& item = items_[i];
    const auto& partner = items_[partners_[i]];
    if (scoring::single_token_choices(item)) {
      replacement_[i] = {capture_z(*model_, partner.prompt)};
      return;
    }
    for (const auto& c : item.choices)
      replacement_[i].push_back(capture_z(*model_, scoring::scoring_input(partner.prompt, c)));
  });
}

void Ablation::build_mean() {
  std::vector<std::vector<std::vector<int>>> inputs(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) inputs[i] = scoring::item_inputs(items_[i]);
  std::vector<std::vector<std::vector<MatD>>> z(items_.size());
  parallel_for(items_.size(), [&](std::size_t i) {
    for (const auto& in : inputs[i]) z[i].push_back(capture_z(*model_, in));
  });
  // Sum in item order for a schedule-independent mean.
  std::map<std::size_t, std::pair<std::vector<MatD>, int>> sums;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto& [acc, n] = sums[inputs[i][k].size()];
      if (acc.empty()) {
        acc = z[i][k];
      } else {
        for (std::size_t l = 0; l < acc.size(); ++l) acc[l] += z[i][k][l];
      }
      ++n;
    }
  }
  for (auto& [len, s] : sums)
    for (auto& m : s.first) m /= s.second;
  replacement_.resize(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i)
    for (const auto& in : inputs[i]) replacement_[i].push_back(sums[in.size()].first);
}

std::vector<double> Ablation::choice_log_probs(std::size_t i, const HeadSet& ablated) const {
  const auto& item = items_[i];
  const auto& c = model_->config();
  const auto kind = mode_ == AblationMode::kMean ? model::PatchKind::kMean : model::PatchKind::kSubstitute;
  if (ablated.empty()) return scoring::choice_log_probs(*model_, item);
  if (scoring::single_token_choices(item)) {
    const auto plan = replacement_plan(c, replacement_[i][0], ablated, kind);
    return scoring::choice_log_probs(*model_, item, &plan);
  }
  std::vector<double> out;
  for (std::size_t k = 0; k < item.choices.size(); ++k) {
    const auto plan = replacement_plan(c, replacement_[i][k], ablated, kind);
    const auto lp = model::seq_log_probs(*model_, item.prompt, item.choices[k], &plan);
    double s = 0.0;
    for (double v : lp) s += v;
    out.push_back(s / static_cast<double>(lp.size()));
  }
  return out;
}

// ---- evaluation ----

nlohmann::json to_json(const EvalResult& r) {
  return {{"score", r.score},
          {"n_items", r.n_items},
          {"ablation", r.ablation},
          {"mode", to_string(r.mode)},
          {"predictions", r.predictions},
          {"choice_probs", r.choice_probs}};
}

namespace {

void check_circuit(const Circuit& circuit, const model::ModelConfig& c) {
  if (!circuit.model_config.same_architecture(c)) throw ConfigError("circuit does not match the model config");
  for (const auto& h : circuit.selected)
    if (!model::contains(c, h)) throw ConfigError("circuit head " + model::to_string(h) + " outside model");
}

HeadSet complement(const model::ModelConfig& c, const HeadSet& keep) {
  HeadSet out;
  for (const auto& h : model::all_heads(c))
    if (!keep.count(h)) out.insert(h);
  return out;
}

double gold_log_prob(const std::vector<double>& choice_logs, const tasks::TaskItem& item) {
  return choice_logs.at(item.gold);
}

}  // namespace

EvalResult eval_task(const ModelParams& params, std::span<const tasks::TaskItem> items, const Circuit* circuit,
                     AblationMode mode, std::uint64_t seed) {
  if (items.empty()) throw ConfigError("eval_task: no items");
  const CompiledModel model(params);
  const auto& c = model.config();
  HeadSet ablated;
  if (circuit) {
    check_circuit(*circuit, c);
    ablated = complement(c, circuit->selected);
  }
  std::optional<Ablation> ablation;
  if (!ablated.empty()) ablation.emplace(model, items, mode, seed);

  EvalResult r;
  r.n_items = static_cast<int>(items.size());
  r.ablation = circuit ? "circuit-only" : "none";
  r.mode = mode;
  r.choice_probs.resize(items.size());
  r.predictions.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto logs = ablation ? ablation->choice_log_probs(i, ablated) : scoring::choice_log_probs(model, items[i]);
    r.predictions[i] = scoring::argmax(logs);
    for (double v : logs) r.choice_probs[i].push_back(std::exp(v));
  });
  int correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) correct += r.predictions[i] == items[i].gold;
  r.score = static_cast<double>(correct) / static_cast<double>(items.size());
  return r;
}

std::optional<double> faithfulness(const Circuit& circuit, const ModelParams& params,
                                   std::span<const tasks::TaskItem> items, AblationMode mode, std::uint64_t seed) {
  const double full = eval_task(params, items, nullptr, mode, seed).score;
  if (full == 0.0) return std::nullopt;
  return eval_task(params, items, &circuit, mode, seed).score / full;
}

// ---- mask and set operations ----

std::vector<double> mask_shift(const Circuit& base, const Circuit& model) {
  if (!base.model_config.same_architecture(model.model_config) || base.masks.size() != model.masks.size()) {
    throw ConfigError("mask_shift: circuits cover different head universes");
  }
  std::vector<double> d(base.masks.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = model.masks[i] - base.masks[i];
  return d;
}

HeadSet vulnerable_heads(const model::ModelConfig& config, std::span<const double> m_sft,
                         std::span<const double> m_rl, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("vulnerable_heads: delta must be in (0, 1)");
  if (m_sft.size() != m_rl.size() || static_cast<int>(m_sft.size()) != config.total_heads()) {
    throw ConfigError("vulnerable_heads: mask vectors do not cover the head universe");
  }
  HeadSet out;
  for (int i = 0; i < static_cast<int>(m_sft.size()); ++i)
    if (m_sft[i] < m_rl[i] - delta) out.insert(model::head_at(config, i));
  return out;
}

HeadSet vulnerable_heads(const Circuit& sft, const Circuit& rl, double delta) {
  if (!sft.model_config.same_architecture(rl.model_config)) throw ConfigError("vulnerable_heads: universe mismatch");
  return vulnerable_heads(sft.model_config, sft.masks, rl.masks, delta);
}

double percent(double part, double whole) { return 100.0 * part / whole; }

double retention_pct(const HeadSet& base, const HeadSet& model) {
  if (base.empty()) throw ConfigError("retention_pct: base circuit is empty");
  int kept = 0;
  for (const auto& h : base) kept += model.count(h) ? 1 : 0;
  return percent(kept, static_cast<double>(base.size()));
}

double retention_pct(const Circuit& base, const Circuit& model) {
  if (!base.model_config.same_architecture(model.model_config)) throw ConfigError("retention_pct: universe mismatch");
  return retention_pct(base.selected, model.selected);
}

nlohmann::json to_json(const Overlap& o) {
  return {{"regions",
           {{"base_only", o.base_only},
            {"sft_only", o.sft_only},
            {"rl_only", o.rl_only},
            {"base_sft_only", o.base_sft_only},
            {"base_rl_only", o.base_rl_only},
            {"sft_rl_only", o.sft_rl_only},
            {"all_three", o.all_three}}},
          {"order", {"base", "sft", "rl"}},
          {"matrix", o.matrix}};
}

Overlap overlap_counts(const HeadSet& base, const HeadSet& sft, const HeadSet& rl) {
  Overlap o;
  HeadSet all = base;
  all.insert(sft.begin(), sft.end());
  all.insert(rl.begin(), rl.end());
  for (const auto& h : all) {
    const bool b = base.count(h), s = sft.count(h), r = rl.count(h);
    if (b && s && r) ++o.all_three;
    else if (b && s) ++o.base_sft_only;
    else if (b && r) ++o.base_rl_only;
    else if (s && r) ++o.sft_rl_only;
    else if (b) ++o.base_only;
    else if (s) ++o.sft_only;
    else ++o.rl_only;
  }
  const std::array<const HeadSet*, 3> sets{&base, &sft, &rl};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      int n = 0;
      for (const auto& h : *sets[i]) n += sets[j]->count(h) ? 1 : 0;
      o.matrix[i][j] = n;
    }
  }
  return o;
}

Overlap overlap_counts(const Circuit& base, const Circuit& sft, const Circuit& rl) {
  if (!base.model_config.same_architecture(sft.model_config) || !base.model_config.same_architecture(rl.model_config)) {
    throw ConfigError("overlap_counts: universe mismatch");
  }
  return overlap_counts(base.selected, sft.selected, rl.selected);
}

std::vector<LayerCounts> layer_retention_profile(const model::ModelConfig& config, const HeadSet& base,
                                                 const HeadSet& model) {
  std::vector<LayerCounts> out(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) out[l].layer = l;
  for (const auto& h : model::all_heads(config)) {
    const bool b = base.count(h), m = model.count(h);
    if (b && m) ++out[h.layer].retained;
    else if (b) ++out[h.layer].forgotten;
    else if (m) ++out[h.layer].added;
  }
  return out;
}

std::vector<LayerCounts> layer_retention_profile(const Circuit& base, const Circuit& model) {
  if (!base.model_config.same_architecture(model.model_config)) throw ConfigError("layer profile: universe mismatch");
  return layer_retention_profile(base.model_config, base.selected, model.selected);
}

// ---- head-level causal scores ----

HeadScores head_scores(const Ablation& ablation, const model::ModelConfig& config) {
  const auto heads = model::all_heads(config);
  const HeadSet everything(heads.begin(), heads.end());
  const std::size_t n = ablation.size();
  const std::size_t H = heads.size();
  // Per item: intact, all ablated, then each head ablated alone and kept alone.
  std::vector<std::vector<double>> rows(n, std::vector<double>(2 + 2 * H));
  parallel_for(n, [&](std::size_t i) {
    const auto& item = ablation.item(i);
    auto& row = rows[i];
    row[0] = gold_log_prob(ablation.choice_log_probs(i, {}), item);
    row[1] = gold_log_prob(ablation.choice_log_probs(i, everything), item);
    for (std::size_t k = 0; k < H; ++k) {
      row[2 + k] = gold_log_prob(ablation.choice_log_probs(i, {heads[k]}), item);
      HeadSet others = everything;
      others.erase(heads[k]);
      row[2 + H + k] = gold_log_prob(ablation.choice_log_probs(i, others), item);
    }
  });
  std::vector<double> mean(2 + 2 * H, 0.0);
  for (const auto& row : rows)
    for (std::size_t k = 0; k < row.size(); ++k) mean[k] += row[k];
  for (double& v : mean) v /= static_cast<double>(n);

  HeadScores out;
  const double s_all = mean[0], s_none = mean[1];
  for (std::size_t k = 0; k < H; ++k) {
    double nec = 0.0;
    for (const auto& row : rows) nec += row[0] - row[2 + k];
    out.necessity.push_back(nec / static_cast<double>(n));
    if (std::abs(s_all - s_none) < 1e-6) {
      out.sufficiency.push_back(std::nullopt);
    } else {
      out.sufficiency.push_back((mean[2 + H + k] - s_none) / (s_all - s_none));
    }
  }
  return out;
}

HeadScores head_scores(const ModelParams& params, std::span<const tasks::TaskItem> items, AblationMode mode,
                       std::uint64_t seed) {
  const CompiledModel model(params);
  return head_scores(Ablation(model, items, mode, seed), model.config());
}

double necessity_score(const ModelParams& params, HeadId head, std::span<const tasks::TaskItem> items,
                       AblationMode mode, std::uint64_t seed) {
  const CompiledModel model(params);
  if (!model::contains(model.config(), head)) throw ConfigError("necessity: head " + model::to_string(head) + " outside model");
  const Ablation ablation(model, items, mode, seed);
  std::vector<double> drop(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    drop[i] = gold_log_prob(ablation.choice_log_probs(i, {}), items[i]) -
              gold_log_prob(ablation.choice_log_probs(i, {head}), items[i]);
  });
  double s = 0.0;
  for (double v : drop) s += v;
  return s / static_cast<double>(items.size());
}

std::optional<double> sufficiency_score(const ModelParams& params, HeadId head,
                                        std::span<const tasks::TaskItem> items, AblationMode mode,
                                        std::uint64_t seed) {
  const CompiledModel model(params);
  const auto& c = model.config();
  if (!model::contains(c, head)) throw ConfigError("sufficiency: head " + model::to_string(head) + " outside model");
  const Ablation ablation(model, items, mode, seed);
  const auto heads = model::all_heads(c);
  const HeadSet everything(heads.begin(), heads.end());
  HeadSet others = everything;
  others.erase(head);
  std::vector<std::array<double, 3>> s(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    s[i] = {gold_log_prob(ablation.choice_log_probs(i, {}), items[i]),
            gold_log_prob(ablation.choice_log_probs(i, everything), items[i]),
            gold_log_prob(ablation.choice_log_probs(i, others), items[i])};
  });
  double s_all = 0.0, s_none = 0.0, s_only = 0.0;
  for (const auto& v : s) {
    s_all += v[0];
    s_none += v[1];
    s_only += v[2];
  }
  const double n = static_cast<double>(items.size());
  s_all /= n;
  s_none /= n;
  s_only /= n;
  if (std::abs(s_all - s_none) < 1e-6) return std::nullopt;
  return (s_only - s_none) / (s_all - s_none);
}

double cmap_delta(const ModelParams& base, const ModelParams& finetuned, HeadId head,
                  std::span<const tasks::TaskItem> items) {
  if (!base.config.same_architecture(finetuned.config)) throw ConfigError("cmap_delta: model configs differ");
  if (items.empty()) throw ConfigError("cmap_delta: no items");
  const CompiledModel mb(base), mf(finetuned);
  const auto& c = mb.config();
  if (!model::contains(c, head)) throw ConfigError("cmap_delta: head " + model::to_string(head) + " outside model");
  std::vector<int> plain(items.size()), patched(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& item = items[i];
    plain[i] = scoring::argmax(scoring::choice_log_probs(mb, item)) == item.gold;
    const auto inputs = scoring::item_inputs(item);
    std::vector<double> logs;
    if (inputs.size() == 1) {
      const auto plan = replacement_plan(c, capture_z(mf, inputs[0]), {head}, model::PatchKind::kSubstitute);
      logs = scoring::choice_log_probs(mb, item, &plan);
    } else {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto plan = replacement_plan(c, capture_z(mf, inputs[k]), {head}, model::PatchKind::kSubstitute);
        const auto lp = model::seq_log_probs(mb, item.prompt, item.choices[k], &plan);
        double s = 0.0;
        for (double v : lp) s += v;
        logs.push_back(s / static_cast<double>(lp.size()));
      }
    }
    patched[i] = scoring::argmax(logs) == item.gold;
  });
  int a = 0, b = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    a += patched[i];
    b += plain[i];
  }
  return static_cast<double>(a - b) / static_cast<double>(items.size());
}

double dcm_logit_gap(const ModelParams& params, const HeadSet& heads, std::span<const tasks::Triplet> triplets) {
  if (triplets.empty()) throw ConfigError("dcm: no triplets");
  const CompiledModel model(params);
  const auto& c = model.config();
  for (const auto& h : heads)
    if (!model::contains(c, h)) throw ConfigError("dcm: head " + model::to_string(h) + " outside model");
  std::vector<double> gap(triplets.size());
  parallel_for(triplets.size(), [&](std::size_t i) {
    const auto& t = triplets[i];
    if (t.base.size() != t.source.size() || t.target.empty()) throw ConfigError("dcm: misaligned triplet");
    const auto input = scoring::scoring_input(t.base, t.target);
    const auto pos = static_cast<Eigen::Index>(t.base.size() - 1);
    const double before = model.forward(input).logits(pos, t.target.front());
    if (heads.empty()) {
      gap[i] = 0.0;
      return;
    }
    const auto plan = replacement_plan(c, capture_z(model, scoring::scoring_input(t.source, t.target)), heads,
                                       model::PatchKind::kSubstitute);
    gap[i] = model.forward(input, &plan).logits(pos, t.target.front()) - before;
  });
  double s = 0.0;
  for (double v : gap) s += v;
  return s / static_cast<double>(triplets.size());
}

std::optional<double> dcm_score(const ModelParams& params, const Circuit& circuit,
                                std::span<const tasks::Triplet> triplets) {
  check_circuit(circuit, params.config);
  for (const auto& t : triplets)
    if (t.hypothesis != tasks::Hypothesis::kAnswerKeySwap) throw ConfigError("dcm: triplets must be answer_key_swap");
  if (circuit.selected.empty()) return std::nullopt;
  return dcm_logit_gap(params, circuit.selected, triplets);
}

std::optional<double> pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 3) throw ConfigError("pearson_r: need equal lengths >= 3");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---- comparison ----

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json heads_json(const HeadSet& s) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& h : s) a.push_back({h.layer, h.head});
  return a;
}

nlohmann::json layers_json(const std::vector<LayerCounts>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& l : v)
    a.push_back({{"layer", l.layer}, {"retained", l.retained}, {"forgotten", l.forgotten}, {"new", l.added}});
  return a;
}

}  // namespace

nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.heads) {
    heads.push_back({{"layer", h.head.layer},
                     {"head", h.head.head},
                     {"m_base", h.m_base},
                     {"m_sft", h.m_sft},
                     {"m_rl", h.m_rl},
                     {"delta_sft", h.delta_sft},
                     {"delta_rl", h.delta_rl},
                     {"nec_base", h.nec_base},
                     {"nec_sft", h.nec_sft},
                     {"nec_rl", h.nec_rl},
                     {"suf_base", optional_json(h.suf_base)},
                     {"suf_sft", optional_json(h.suf_sft)},
                     {"suf_rl", optional_json(h.suf_rl)},
                     {"in_base", h.in_base},
                     {"in_sft", h.in_sft},
                     {"in_rl", h.in_rl}});
  }
  return {{"heads", heads},
          {"retention_pct", {{"sft", optional_json(r.retention_sft)}, {"rl", optional_json(r.retention_rl)}}},
          {"overlap", to_json(r.overlap)},
          {"vulnerable", heads_json(r.vulnerable)},
          {"delta", r.delta},
          {"dcm", {{"base", optional_json(r.dcm_base)}, {"sft", optional_json(r.dcm_sft)}, {"rl", optional_json(r.dcm_rl)}}},
          {"pearson_necessity_vs_shift",
           {{"sft", optional_json(r.pearson_sft)}, {"rl", optional_json(r.pearson_rl)}}},
          {"layer_profile", {{"sft", layers_json(r.layers_sft)}, {"rl", layers_json(r.layers_rl)}}}};
}

ComparisonReport compare(const ModelTriple& models, const CircuitTriple& circuits,
                         std::span<const tasks::TaskItem> items, std::span<const tasks::Triplet> answer_swaps,
                         const AnalysisConfig& config) {
  config.validate();
  const auto& c = models.base->config;
  for (const ModelParams* m : {models.sft, models.rl})
    if (!m->config.same_architecture(c)) throw ConfigError("compare: model configs differ");
  for (const Circuit* k : {circuits.base, circuits.sft, circuits.rl}) check_circuit(*k, c);

  ComparisonReport r;
  r.delta = config.delta;
  const auto d_sft = mask_shift(*circuits.base, *circuits.sft);
  const auto d_rl = mask_shift(*circuits.base, *circuits.rl);
  const HeadScores s_base = head_scores(*models.base, items, config.mode, config.seed);
  const HeadScores s_sft = head_scores(*models.sft, items, config.mode, config.seed);
  const HeadScores s_rl = head_scores(*models.rl, items, config.mode, config.seed);
  for (const auto& h : model::all_heads(c)) {
    const int k = model::flat_index(c, h);
    HeadRow row;
    row.head = h;
    row.m_base = circuits.base->masks[k];
    row.m_sft = circuits.sft->masks[k];
    row.m_rl = circuits.rl->masks[k];
    row.delta_sft = d_sft[k];
    row.delta_rl = d_rl[k];
    row.nec_base = s_base.necessity[k];
    row.nec_sft = s_sft.necessity[k];
    row.nec_rl = s_rl.necessity[k];
    row.suf_base = s_base.sufficiency[k];
    row.suf_sft = s_sft.sufficiency[k];
    row.suf_rl = s_rl.sufficiency[k];
    row.in_base = circuits.base->contains(h);
    row.in_sft = circuits.sft->contains(h);
    row.in_rl = circuits.rl->contains(h);
    r.heads.push_back(row);
  }
  if (!circuits.base->selected.empty()) {
    r.retention_sft = retention_pct(*circuits.base, *circuits.sft);
    r.retention_rl = retention_pct(*circuits.base, *circuits.rl);
  }
  r.overlap = overlap_counts(*circuits.base, *circuits.sft, *circuits.rl);
  r.vulnerable = vulnerable_heads(*circuits.sft, *circuits.rl, config.delta);
  if (!answer_swaps.empty()) {
    r.dcm_base = dcm_score(*models.base, *circuits.base, answer_swaps);
    r.dcm_sft = dcm_score(*models.sft, *circuits.sft, answer_swaps);
    r.dcm_rl = dcm_score(*models.rl, *circuits.rl, answer_swaps);
  }
  r.pearson_sft = pearson_r(s_sft.necessity, d_sft);
  r.pearson_rl = pearson_r(s_rl.necessity, d_rl);
  r.layers_sft = layer_retention_profile(*circuits.base, *circuits.sft);
  r.layers_rl = layer_retention_profile(*circuits.base, *circuits.rl);
  return r;
}

}  // namespace circuitlab::analysis
