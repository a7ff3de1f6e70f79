#include "circuitlab/dbm.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/core.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/parallel.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/scoring.hpp"

namespace circuitlab::dbm {

using model::CompiledModel;
using model::HeadId;

double anneal_temperature(const TemperatureSchedule& s, int step) {
  if (s.total_steps <= 0) return step <= 0 ? s.start : s.end;
  if (step <= 0) return s.start;
  if (step >= s.total_steps) return s.end;
  return s.start * std::pow(s.end / s.start, static_cast<double>(step) / s.total_steps);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

MaskState MaskState::initial(const model::ModelConfig& config, double temperature) {
  return MaskState{std::vector<double>(config.total_heads(), 0.0), temperature};
}

std::vector<double> MaskState::masks() const {
  std::vector<double> m(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) m[i] = sigmoid(logits[i] / temperature);
  return m;
}

void DbmConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("dbm: lambda must be >= 0");
  if (steps < 1) throw ConfigError("dbm: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("dbm: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("dbm: learning_rate must be > 0");
  if (!(tau_end > 0.0) || !(tau_start >= tau_end)) throw ConfigError("dbm: need tau_start >= tau_end > 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("dbm: threshold must be in (0, 1)");
}

void to_json(nlohmann::json& j, const DbmConfig& c) {
  j = {{"lambda", c.lambda},   {"steps", c.steps},         {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate}, {"tau_start", c.tau_start}, {"tau_end", c.tau_end},
       {"threshold", c.threshold}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DbmConfig& c) {
  c = DbmConfig{};
  c.lambda = j.value("lambda", c.lambda);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.tau_start = j.value("tau_start", c.tau_start);
  c.tau_end = j.value("tau_end", c.tau_end);
  c.threshold = j.value("threshold", c.threshold);
  c.seed = j.value("seed", c.seed);
}

std::vector<int> binarize(std::span<const double> masks, double threshold) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(masks.size()); ++i)
    if (masks[i] > threshold) out.push_back(i);
  return out;
}

model::HeadSet binarize(const model::ModelConfig& config, std::span<const double> masks, double threshold) {
  if (static_cast<int>(masks.size()) != config.total_heads()) {
    throw ConfigError(fmt::format("binarize: {} masks for {} heads", masks.size(), config.total_heads()));
  }
  model::HeadSet out;
  for (int i : binarize(masks, threshold)) out.insert(model::head_at(config, i));
  return out;
}

nlohmann::json to_json(const Circuit& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : model::all_heads(c.model_config))
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"m", c.mask(h)}});
  nlohmann::json selected = nlohmann::json::array();
  for (const auto& h : c.selected) selected.push_back({h.layer, h.head});
  nlohmann::json j = {{"model_tag", c.model_tag},
                      {"config_echo", c.config},
                      {"model_config", c.model_config},
                      {"threshold", c.threshold},
                      {"heads", heads},
                      {"selected", selected},
                      {"discovery_failed", c.discovery_failed},
                      {"failure_reason", c.failure_reason},
                      {"final_nll", c.final_nll},
                      {"base_nll", c.base_nll}};
  j["faithfulness"] = c.faithfulness ? nlohmann::json(*c.faithfulness) : nlohmann::json(nullptr);
  return j;
}

Circuit circuit_from_json(const nlohmann::json& j) {
  Circuit c;
  c.model_tag = j.value("model_tag", std::string());
  c.config = j.value("config_echo", DbmConfig{});
  c.model_config = j.at("model_config").get<model::ModelConfig>();
  c.model_config.validate();
  c.threshold = j.at("threshold").get<double>();
  c.masks.assign(c.model_config.total_heads(), NAN);
  for (const auto& h : j.at("heads")) {
    const HeadId id{h.at("layer").get<int>(), h.at("head").get<int>()};
    if (!model::contains(c.model_config, id)) throw ConfigError("circuit: head " + model::to_string(id) + " outside model");
    c.masks[model::flat_index(c.model_config, id)] = h.at("m").get<double>();
  }
  for (double m : c.masks)
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("circuit: heads list must cover every head once with m in [0, 1]");
  for (const auto& s : j.at("selected")) {
    const auto v = s.get<std::vector<int>>();
    if (v.size() != 2 || !model::contains(c.model_config, {v[0], v[1]})) throw ConfigError("circuit: bad selected head");
    c.selected.insert({v[0], v[1]});
  }
  c.discovery_failed = j.value("discovery_failed", false);
  c.failure_reason = j.value("failure_reason", std::string());
  c.final_nll = j.value("final_nll", 0.0);
  c.base_nll = j.value("base_nll", 0.0);
  if (j.contains("faithfulness") && !j.at("faithfulness").is_null()) c.faithfulness = j.at("faithfulness").get<double>();
  return c;
}

void save_circuit(const Circuit& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out << to_json(c).dump(2) << '\n';
}

Circuit load_circuit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return circuit_from_json(nlohmann::json::parse(in));
}

Circuit circuit_from_heads(const model::ModelConfig& config, const model::HeadSet& heads, std::string tag) {
  Circuit c;
  c.model_tag = std::move(tag);
  c.model_config = config;
  c.masks.assign(config.total_heads(), 0.0);
  for (const auto& h : heads) {
    if (!model::contains(config, h)) throw ConfigError("circuit: head " + model::to_string(h) + " outside model");
    c.masks[model::flat_index(config, h)] = 1.0;
  }
  c.selected = heads;
  return c;
}

PreparedTriplet prepare_triplet(const CompiledModel& model, const tasks::Triplet& t) {
  if (t.base.size() != t.source.size()) {
    throw ConfigError(fmt::format("dbm: misaligned triplet (base {} tokens, source {})", t.base.size(), t.source.size()));
  }
  if (t.target.empty()) throw ConfigError("dbm: triplet has an empty target");
  PreparedTriplet p;
  p.base_input = scoring::scoring_input(t.base, t.target);
  p.target = t.target;
  p.prompt_length = t.base.size();
  const auto source_input = scoring::scoring_input(t.source, t.target);
  p.source = *model.forward(source_input, nullptr, true).cache;
  return p;
}

namespace {

model::PatchPlan interpolation_plan(const model::ModelConfig& c, const std::vector<double>& m,
                                    const PreparedTriplet& t) {
  model::PatchPlan plan;
  const int len = static_cast<int>(t.base_input.size());
  for (const auto& h : model::all_heads(c)) plan.interpolate(h, 0, len, m[model::flat_index(c, h)], t.source.head(h));
  return plan;
}

}  // namespace

DbmLoss dbm_loss_and_grad(const CompiledModel& model, const MaskState& mask, std::span<const PreparedTriplet> batch,
                          double lambda) {
  const auto& c = model.config();
  if (batch.empty()) throw ConfigError("dbm: empty batch");
  if (static_cast<int>(mask.logits.size()) != c.total_heads()) throw ConfigError("dbm: mask size does not match model");
  const std::vector<double> m = mask.masks();
  const int H = c.total_heads();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  std::vector<double> nll(batch.size());
  std::vector<std::vector<double>> grads(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& t = batch[i];
    const model::PatchPlan plan = interpolation_plan(c, m, t);
    model::LossSpec loss;
    const double w = inv_b / static_cast<double>(t.target.size());
    for (std::size_t k = 0; k < t.target.size(); ++k)
      loss.nll.push_back({static_cast<int>(t.prompt_length - 1 + k), t.target[k], w});
    auto g = model::compute_gradients(model, t.base_input, &plan, loss, {.params = false, .patch_coefficients = true});
    nll[i] = g.loss;
    grads[i] = std::move(g.coefficient_grads);
  });

  DbmLoss out;
  out.mask_grads.assign(H, lambda);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.nll += nll[i];
    for (int h = 0; h < H; ++h) out.mask_grads[h] += grads[i][h];
  }
  double mask_sum = 0.0;
  for (double v : m) mask_sum += v;
  out.loss = out.nll + lambda * mask_sum;
  out.logit_grads.resize(H);
  for (int h = 0; h < H; ++h) out.logit_grads[h] = out.mask_grads[h] * m[h] * (1.0 - m[h]) / mask.temperature;
  return out;
}

double dbm_loss(const model::ModelParams& params, const MaskState& mask, std::span<const tasks::Triplet> batch,
                double lambda) {
  const CompiledModel model(params);
  std::vector<PreparedTriplet> prepared;
  for (const auto& t : batch) prepared.push_back(prepare_triplet(model, t));
  return dbm_loss_and_grad(model, mask, prepared, lambda).loss;
}

nlohmann::json to_json(const TracePoint& p) {
  return {{"step", p.step}, {"loss", p.loss}, {"tau", p.tau}, {"mask_sum", p.mask_sum}};
}

Discovery discover_circuit(const model::ModelParams& params, std::span<const tasks::Triplet> triplets,
                           const DbmConfig& config, std::string model_tag) {
  config.validate();
  if (static_cast<int>(triplets.size()) < config.batch_size) {
    throw ConfigError(fmt::format("dbm: {} triplets for batch size {}", triplets.size(), config.batch_size));
  }
  const CompiledModel model(params);
  const auto& c = model.config();
  std::vector<PreparedTriplet> prepared(triplets.size());
  parallel_for(triplets.size(), [&](std::size_t i) { prepared[i] = prepare_triplet(model, triplets[i]); });

  const TemperatureSchedule schedule{config.tau_start, config.tau_end, config.steps};
  MaskState mask = MaskState::initial(c, config.tau_start);
  const int H = c.total_heads();
  std::vector<double> m1(H, 0.0), m2(H, 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  Discovery out;
  std::vector<std::size_t> order(prepared.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  std::vector<PreparedTriplet> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < config.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(config.seed, {0xDB3, epoch++}));
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      batch.push_back(prepared[order[cursor++]]);
    }
    mask.temperature = anneal_temperature(schedule, step);
    const DbmLoss l = dbm_loss_and_grad(model, mask, batch, config.lambda);
    if (!std::isfinite(l.loss)) throw NumericError(fmt::format("dbm: non-finite loss at step {}", step));
    double mask_sum = 0.0;
    for (double v : mask.masks()) {
      if (!(v >= 0.0 && v <= 1.0)) throw NumericError(fmt::format("dbm: mask left [0, 1] at step {}", step));
      mask_sum += v;
    }
    out.trace.push_back({step, l.loss, mask.temperature, mask_sum});

    const double c1 = 1.0 - std::pow(kBeta1, step + 1), c2 = 1.0 - std::pow(kBeta2, step + 1);
    for (int h = 0; h < H; ++h) {
      const double g = l.logit_grads[h];
      m1[h] = kBeta1 * m1[h] + (1.0 - kBeta1) * g;
      m2[h] = kBeta2 * m2[h] + (1.0 - kBeta2) * g * g;
      mask.logits[h] -= config.learning_rate * (m1[h] / c1) / (std::sqrt(m2[h] / c2) + kEps);
    }
  }
  mask.temperature = anneal_temperature(schedule, config.steps);

  Circuit& circuit = out.circuit;
  circuit.model_tag = std::move(model_tag);
  circuit.model_config = c;
  circuit.config = config;
  circuit.threshold = config.threshold;
  circuit.masks = mask.masks();
  circuit.selected = binarize(c, circuit.masks, config.threshold);
  circuit.final_nll = dbm_loss_and_grad(model, mask, prepared, 0.0).nll;
  MaskState off = mask;
  std::fill(off.logits.begin(), off.logits.end(), -INFINITY);
  circuit.base_nll = dbm_loss_and_grad(model, off, prepared, 0.0).nll;
  if (circuit.selected.empty() && !(circuit.final_nll < circuit.base_nll)) {
    circuit.discovery_failed = true;
    circuit.failure_reason = fmt::format(
        "no head selected and target log-probability not improved (final nll {:.6f}, unpatched {:.6f})",
        circuit.final_nll, circuit.base_nll);
  }
  return out;
}

}  // namespace circuitlab::dbm
