#include "circuitlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

#include "circuitlab/checkpoint.hpp"
#include "circuitlab/errors.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/scoring.hpp"
#include "circuitlab/transformer.hpp"

namespace circuitlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stage seed salts.
constexpr std::uint64_t kSaltTasks = 0x7A5;
constexpr std::uint64_t kSaltPretrainItems = 0x9E7;
constexpr std::uint64_t kSaltInit = 0x1A17;
constexpr std::uint64_t kSaltPretrain = 0x9E8;
constexpr std::uint64_t kSaltSft = 0x5F0;
constexpr std::uint64_t kSaltRl = 0xA10;
constexpr std::uint64_t kSaltRlBase = 0xA1B;
constexpr std::uint64_t kSaltTriplets = 0x781;
constexpr std::uint64_t kSaltDbm = 0xDB0;
constexpr std::uint64_t kSaltAnalysis = 0xA7A;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Block defaults overlaid with the user's keys, so a partial block keeps the pipeline defaults.
template <class T>
T merged(const T& defaults, const json& j, const char* key) {
  if (!j.contains(key)) return defaults;
  json d = defaults;
  d.merge_patch(j.at(key));
  return d.get<T>();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> optional_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

void write_trace(const fs::path& path, const training::TrainTrace& trace, const std::vector<std::string>& ckpts) {
  std::string text = training::to_json(trace.initial).dump() + "\n";
  for (auto rec : trace.records) {
    if (rec.checkpoint) rec.checkpoint_path = ckpts.at(static_cast<std::size_t>(*rec.checkpoint));
    text += training::to_json(rec).dump() + "\n";
  }
  write_text(path, text);
}

std::vector<tasks::TaskType> retention_types() {
  return {tasks::TaskType::kCopy, tasks::TaskType::kReverse, tasks::TaskType::kSuccessor};
}

}  // namespace

// ---- config ----

std::vector<double> SweepConfig::resolved() const {
  if (!targets.empty()) return targets;
  if (n_targets == 1) return {min_target};
  std::vector<double> out;
  for (int i = 0; i < n_targets; ++i)
    out.push_back(min_target + (max_target - min_target) * i / (n_targets - 1));
  return out;
}

void MasterConfig::validate() const {
  model.validate();
  if (tasks.vocab_size != model.vocab_size) {
    throw ConfigError(fmt::format("tasks.vocab_size {} differs from model.vocab_size {}", tasks.vocab_size,
                                  model.vocab_size));
  }
  if (pretrain.items_per_subtype < 0) throw ConfigError("pretrain.items_per_subtype must be >= 0");
  for (const auto* s : {&pretrain.sft, &sft}) {
    if (s->epochs < 0) throw ConfigError("epochs must be >= 0");
    if (s->batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(s->learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  }
  if (rl_epochs < 0) throw ConfigError("rl_epochs must be >= 0");
  if (triplets_per_hypothesis < 1) throw ConfigError("triplets.per_hypothesis must be >= 1");
  if (hypotheses.empty()) throw ConfigError("triplets.hypotheses must not be empty");
  dbm.validate();
  analysis.validate();
  if (sweep.targets.empty() && sweep.n_targets < 1) throw ConfigError("sweep.n_targets must be >= 1");
  for (double t : sweep.resolved())
    if (!std::isfinite(t)) throw ConfigError("sweep targets must be finite");
  for (const auto& f : formats)
    if (f != "csv" && f != "json" && f != "svg") throw ConfigError("unknown report format '" + f + "'");
}

void to_json(json& j, const MasterConfig& c) {
  json hyps = json::array();
  for (auto h : c.hypotheses) hyps.push_back(tasks::to_string(h));
  j = {{"seed", c.seed},
       {"model", c.model},
       {"tasks", c.tasks},
       {"pretrain", {{"items_per_subtype", c.pretrain.items_per_subtype}, {"training", c.pretrain.sft}}},
       {"sft", c.sft},
       {"rl", c.rl},
       {"rl_epochs", c.rl_epochs},
       {"rl_from_base", c.rl_from_base},
       {"triplets", {{"per_hypothesis", c.triplets_per_hypothesis}, {"hypotheses", hyps}}},
       {"dbm", c.dbm},
       {"analysis", c.analysis},
       {"sweep",
        {{"targets", c.sweep.targets},
         {"n_targets", c.sweep.n_targets},
         {"min_target", c.sweep.min_target},
         {"max_target", c.sweep.max_target}}},
       {"formats", c.formats}};
}

void from_json(const json& j, MasterConfig& c) {
  static const std::set<std::string> known{"seed",     "model",        "tasks",    "pretrain", "sft",
                                           "rl",       "rl_epochs",    "rl_from_base", "triplets", "dbm",
                                           "analysis", "sweep",        "formats"};
  if (!j.is_object()) throw ConfigError("master config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown master config key '" + k + "'");
  const MasterConfig d;
  c = MasterConfig{};
  c.seed = j.value("seed", d.seed);
  c.model = merged(d.model, j, "model");
  c.tasks = merged(d.tasks, j, "tasks");
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    c.pretrain.items_per_subtype = p.value("items_per_subtype", d.pretrain.items_per_subtype);
    c.pretrain.sft = merged(d.pretrain.sft, p, "training");
  }
  c.sft = merged(d.sft, j, "sft");
  c.rl = merged(d.rl, j, "rl");
  c.rl_epochs = j.value("rl_epochs", d.rl_epochs);
  c.rl_from_base = j.value("rl_from_base", d.rl_from_base);
  if (j.contains("triplets")) {
    const auto& t = j.at("triplets");
    c.triplets_per_hypothesis = t.value("per_hypothesis", d.triplets_per_hypothesis);
    if (t.contains("hypotheses")) {
      c.hypotheses.clear();
      for (const auto& h : t.at("hypotheses")) c.hypotheses.push_back(tasks::hypothesis_from_string(h.get<std::string>()));
    }
  }
  c.dbm = merged(d.dbm, j, "dbm");
  c.analysis = merged(d.analysis, j, "analysis");
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    c.sweep.targets = s.value("targets", d.sweep.targets);
    c.sweep.n_targets = s.value("n_targets", d.sweep.n_targets);
    c.sweep.min_target = s.value("min_target", d.sweep.min_target);
    c.sweep.max_target = s.value("max_target", d.sweep.max_target);
  }
  if (j.contains("formats")) c.formats = j.at("formats").get<std::set<std::string>>();
}

MasterConfig load_master_config(const fs::path& path) {
  try {
    return read_json(path).get<MasterConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

int rl_block_size(const MasterConfig& config, const std::vector<tasks::TaskItem>& new_task) {
  if (new_task.empty()) return 1;
  double epoch_tokens = 0.0;
  for (const auto& it : new_task) epoch_tokens += static_cast<double>(it.gold_choice().size() + 1);
  const double per_item = epoch_tokens / static_cast<double>(new_task.size());
  const double per_iteration = config.rl.prompts_per_iteration * config.rl.group_size * per_item;
  return std::max(1, static_cast<int>(std::lround(epoch_tokens / per_iteration)));
}

// ---- manifest ----

bool RunManifest::completed(const std::string& stage) const {
  return std::find(completed_stages.begin(), completed_stages.end(), stage) != completed_stages.end();
}

json to_json(const RunManifest& m) {
  return {{"run_id", m.run_id},
          {"seed", m.seed},
          {"config", m.config},
          {"completed_stages", m.completed_stages},
          {"suite", m.suite},
          {"checkpoints",
           {{"base", m.base_checkpoint.empty() ? json(nullptr) : json(m.base_checkpoint)},
            {"sft", m.sft_checkpoints},
            {"rl", m.rl_checkpoints},
            {"rl_from_base", m.rl_from_base_checkpoints}}},
          {"traces", m.traces},
          {"triplets", m.triplets},
          {"circuits", m.circuits},
          {"circuit_traces", m.circuit_traces},
          {"analysis", m.analysis.empty() ? json(nullptr) : json(m.analysis)},
          {"reports", m.reports}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.run_id = j.at("run_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config");
    m.completed_stages = j.at("completed_stages").get<std::vector<std::string>>();
    m.suite = j.at("suite").get<std::map<std::string, std::string>>();
    const auto& ck = j.at("checkpoints");
    if (!ck.at("base").is_null()) m.base_checkpoint = ck.at("base").get<std::string>();
    m.sft_checkpoints = ck.at("sft").get<std::vector<std::string>>();
    m.rl_checkpoints = ck.at("rl").get<std::vector<std::string>>();
    m.rl_from_base_checkpoints = ck.at("rl_from_base").get<std::vector<std::string>>();
    m.traces = j.at("traces").get<std::map<std::string, std::string>>();
    m.triplets = j.at("triplets").get<std::map<std::string, std::string>>();
    m.circuits = j.at("circuits").get<std::map<std::string, std::string>>();
    m.circuit_traces = j.at("circuit_traces").get<std::map<std::string, std::string>>();
    if (!j.at("analysis").is_null()) m.analysis = j.at("analysis").get<std::string>();
    m.reports = j.at("reports").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("malformed manifest: {}", e.what()));
  }
  return m;
}

RunManifest load_manifest(const fs::path& run_dir) { return manifest_from_json(read_json(run_dir / "manifest.json")); }

void save_manifest(const RunManifest& m, const fs::path& run_dir) {
  write_text(run_dir / "manifest.json", dump(to_json(m)));
}

std::vector<CheckpointRef> checkpoints_in_order(const RunManifest& m) {
  std::vector<CheckpointRef> out;
  if (!m.base_checkpoint.empty()) out.push_back({"base", "base", 0, m.base_checkpoint});
  auto add = [&](const std::vector<std::string>& paths, const char* stage, const char* prefix) {
    for (std::size_t i = 0; i < paths.size(); ++i)
      out.push_back({fmt::format("{}_e{}", prefix, i + 1), stage, static_cast<int>(i + 1), paths[i]});
  };
  add(m.sft_checkpoints, "sft", "sft");
  add(m.rl_checkpoints, "rl", "rl");
  add(m.rl_from_base_checkpoints, "rl_from_base", "rlbase");
  return out;
}

// ---- trajectory and sweep ----

json to_json(const TrajectoryRow& r) {
  return {{"stage", r.stage},
          {"epoch", r.epoch},
          {"checkpoint", r.checkpoint},
          {"nts", r.nts},
          {"retention_pct", optional_json(r.retention_pct)},
          {"faithfulness", optional_json(r.faithfulness)},
          {"dcm", optional_json(r.dcm)},
          {"kl_drift", r.kl_drift},
          {"retention_accuracy", r.retention_accuracy}};
}

TrajectoryRow trajectory_row_from_json(const json& j) {
  TrajectoryRow r;
  r.stage = j.at("stage").get<std::string>();
  r.epoch = j.at("epoch").get<int>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.nts = j.at("nts").get<double>();
  r.retention_pct = optional_from(j, "retention_pct");
  r.faithfulness = optional_from(j, "faithfulness");
  r.dcm = optional_from(j, "dcm");
  r.kl_drift = j.at("kl_drift").get<double>();
  r.retention_accuracy = j.at("retention_accuracy").get<std::map<std::string, double>>();
  return r;
}

json to_json(const SweepRow& r) {
  return {{"objective", r.objective},
          {"target", r.target},
          {"reached", r.reached},
          {"checkpoint", r.reached ? json(r.checkpoint) : json(nullptr)},
          {"epoch", r.reached ? json(r.epoch) : json(nullptr)},
          {"nts", r.reached ? json(r.nts) : json(nullptr)},
          {"retention_pct", r.reached ? optional_json(r.retention_pct) : json(nullptr)}};
}

std::vector<SweepRow> sweep_nts(const std::vector<TrajectoryRow>& rows, const std::vector<double>& targets) {
  std::vector<std::string> objectives;
  for (const auto& r : rows)
    if (r.stage != "base" && std::find(objectives.begin(), objectives.end(), r.stage) == objectives.end())
      objectives.push_back(r.stage);
  std::vector<SweepRow> out;
  for (const auto& obj : objectives) {
    for (double target : targets) {
      SweepRow s;
      s.objective = obj;
      s.target = target;
      for (const auto& r : rows) {
        if (r.stage != obj || !(r.nts >= target)) continue;
        s.reached = true;
        s.checkpoint = r.checkpoint;
        s.epoch = r.epoch;
        s.nts = r.nts;
        s.retention_pct = r.retention_pct;
        break;
      }
      out.push_back(s);
    }
  }
  return out;
}

namespace {

std::vector<TrajectoryRow> stored_trajectory(const fs::path& run_dir, const RunManifest& m) {
  if (m.analysis.empty() || !m.completed("analysis")) throw ConfigError("run has no completed analysis stage");
  const json a = read_json(run_dir / m.analysis);
  std::vector<TrajectoryRow> rows;
  for (const auto& r : a.at("trajectory")) rows.push_back(trajectory_row_from_json(r));
  return rows;
}

}  // namespace

std::vector<SweepRow> sweep_nts(const fs::path& run_dir, const RunManifest& manifest,
                                const std::vector<double>& targets) {
  const auto rows = stored_trajectory(run_dir, manifest);
  std::map<std::string, int> counts;
  for (const auto& r : rows)
    if (r.stage != "base") ++counts[r.stage];
  if (counts.empty()) throw ConfigError("sweep: run has no trained checkpoints");
  for (const auto& [stage, n] : counts)
    if (n < 2) throw ConfigError(fmt::format("sweep: objective '{}' has {} checkpoint(s), need >= 2", stage, n));
  return sweep_nts(rows, targets);
}

json to_json(const DirectionalFlags& f) {
  return {{"rl_retention_geq_sft", f.rl_retention_geq_sft ? json(*f.rl_retention_geq_sft) : json(nullptr)},
          {"matched_targets", f.matched_targets},
          {"sft_adapts_faster", f.sft_adapts_faster ? json(*f.sft_adapts_faster) : json(nullptr)}};
}

DirectionalFlags directional_flags(const std::vector<SweepRow>& sweep) {
  auto find = [&](const std::string& obj, double target) -> const SweepRow* {
    for (const auto& s : sweep)
      if (s.objective == obj && s.target == target) return &s;
    return nullptr;
  };
  DirectionalFlags f;
  bool all_geq = true;
  std::optional<double> top_sft;
  for (const auto& s : sweep) {
    if (s.objective != "sft" || !s.reached) continue;
    if (!top_sft || s.target > *top_sft) top_sft = s.target;
    const SweepRow* rl = find("rl", s.target);
    if (!rl || !rl->reached || !s.retention_pct || !rl->retention_pct) continue;
    ++f.matched_targets;
    all_geq = all_geq && *rl->retention_pct >= *s.retention_pct;
  }
  if (f.matched_targets > 0) f.rl_retention_geq_sft = all_geq;
  if (top_sft) {
    if (const SweepRow* rb = find("rl_from_base", *top_sft)) {
      const SweepRow* sf = find("sft", *top_sft);
      f.sft_adapts_faster = !rb->reached || sf->epoch <= rb->epoch;
    }
  }
  return f;
}

// ---- stages ----

namespace {

class Run {
 public:
  Run(const MasterConfig& config, fs::path dir) : cfg_(config), dir_(std::move(dir)) {}

  RunManifest& manifest() { return m_; }
  const fs::path& dir() const { return dir_; }

  void init_manifest(const json& config_json, const std::string& run_id) {
    m_ = RunManifest{};
    m_.run_id = run_id;
    m_.seed = cfg_.seed;
    m_.config = config_json;
  }
  void set_manifest(RunManifest m) { m_ = std::move(m); }
  void save() const { save_manifest(m_, dir_); }
  fs::path abs(const std::string& rel) const { return dir_ / rel; }

  std::uint64_t seed(std::uint64_t salt) const { return derive_seed(cfg_.seed, {salt}); }

  const tasks::TaskSuite& suite() {
    if (!suite_) {
      tasks::TaskSuite s;
      s.new_task = tasks::read_items_jsonl(abs(m_.suite.at("new_task")));
      s.retention = tasks::read_items_jsonl(abs(m_.suite.at("retention")));
      s.seed = seed(kSaltTasks);
      s.config = cfg_.tasks;
      suite_ = std::move(s);
    }
    return *suite_;
  }

  model::ModelParams load(const std::string& rel) const { return model::load_checkpoint(abs(rel)); }

  std::vector<tasks::TaskItem> eval_items() {
    const auto& nt = suite().new_task;
    const auto n = std::min<std::size_t>(nt.size(), static_cast<std::size_t>(cfg_.analysis.eval_items));
    return {nt.begin(), nt.begin() + static_cast<std::ptrdiff_t>(n)};
  }

  // Artifacts a completed stage must have left behind.
  std::vector<std::string> artifacts(const std::string& stage) const {
    std::vector<std::string> out;
    if (stage == "tasks") {
      for (const auto& [k, v] : m_.suite) out.push_back(v);
      if (m_.suite.size() < 2) out.push_back("<missing suite>");
    } else if (stage == "base") {
      out.push_back(m_.base_checkpoint.empty() ? "<missing base>" : m_.base_checkpoint);
    } else if (stage == "sft") {
      out = m_.sft_checkpoints;
    } else if (stage == "rl") {
      out = m_.rl_checkpoints;
    } else if (stage == "rl_from_base") {
      out = m_.rl_from_base_checkpoints;
    } else if (stage == "triplets") {
      for (const auto& [k, v] : m_.triplets) out.push_back(v);
    } else if (stage == "dbm") {
      for (const auto& [k, v] : m_.circuits) out.push_back(v);
    } else if (stage == "analysis") {
      out.push_back(m_.analysis.empty() ? "<missing analysis>" : m_.analysis);
    } else if (stage == "reports") {
      out = m_.reports;
    }
    return out;
  }

  bool intact(const std::string& stage) const {
    if (!m_.completed(stage)) return false;
    for (const auto& rel : artifacts(stage))
      if (!fs::exists(abs(rel))) return false;
    return true;
  }

  void stage_tasks();
  void stage_base();
  void stage_sft();
  void stage_rl(bool from_base);
  void stage_triplets();
  void stage_dbm();
  void stage_analysis();
  void stage_reports();

 private:
  void save_checkpoints(const training::TrainTrace& trace, const std::string& prefix,
                        std::vector<std::string>& paths);

  const MasterConfig& cfg_;
  fs::path dir_;
  RunManifest m_;
  std::optional<tasks::TaskSuite> suite_;
};

void Run::stage_tasks() {
  const auto suite = tasks::gen_suite(cfg_.tasks, seed(kSaltTasks));
  fs::create_directories(abs("tasks"));
  tasks::write_items_jsonl(abs("tasks/new_task.jsonl"), suite.new_task);
  tasks::write_items_jsonl(abs("tasks/retention.jsonl"), suite.retention);
  m_.suite["new_task"] = "tasks/new_task.jsonl";
  m_.suite["retention"] = "tasks/retention.jsonl";

  // Pretraining corpus: fresh retention items, none sharing a prompt with the evaluation suite.
  std::vector<tasks::TaskItem> corpus;
  if (cfg_.pretrain.items_per_subtype > 0) {
    tasks::GenConfig g = cfg_.tasks;
    g.n_new_task = 1;
    g.n_retention_per_subtype = cfg_.pretrain.items_per_subtype;
    std::set<std::vector<int>> seen;
    for (const auto& it : suite.retention) seen.insert(it.prompt);
    for (auto& it : tasks::gen_suite(g, seed(kSaltPretrainItems)).retention) {
      if (seen.count(it.prompt)) continue;
      it.id = "pre-" + it.id;
      corpus.push_back(std::move(it));
    }
  }
  tasks::write_items_jsonl(abs("tasks/pretrain.jsonl"), corpus);
  m_.suite["pretrain"] = "tasks/pretrain.jsonl";
  suite_.reset();
}

void Run::save_checkpoints(const training::TrainTrace& trace, const std::string& prefix,
                           std::vector<std::string>& paths) {
  paths.clear();
  for (std::size_t i = 0; i < trace.checkpoints.size(); ++i) {
    const std::string rel = fmt::format("checkpoints/{}_e{}.ckpt", prefix, i + 1);
    fs::create_directories(abs(rel).parent_path());
    model::save_checkpoint(trace.checkpoints[i], abs(rel));
    paths.push_back(rel);
  }
}

void Run::stage_base() {
  model::ModelConfig mc = cfg_.model;
  mc.seed = seed(kSaltInit);
  model::ModelParams params = model::init_params(mc);
  const auto corpus = tasks::read_items_jsonl(abs(m_.suite.at("pretrain")));
  if (!corpus.empty() && cfg_.pretrain.sft.epochs > 0) {
    training::SftConfig sc = cfg_.pretrain.sft;
    sc.seed = seed(kSaltPretrain);
    auto res = training::train_sft_items(params, corpus, suite().retention, sc);
    params = std::move(res.params);
    write_trace(abs("traces/pretrain.jsonl"), res.trace, std::vector<std::string>(res.trace.checkpoints.size()));
    m_.traces["pretrain"] = "traces/pretrain.jsonl";
  }
  fs::create_directories(abs("checkpoints"));
  model::save_checkpoint(params, abs("checkpoints/base.ckpt"));
  m_.base_checkpoint = "checkpoints/base.ckpt";
}

void Run::stage_sft() {
  m_.sft_checkpoints.clear();
  if (cfg_.sft.epochs == 0) return;
  training::SftConfig sc = cfg_.sft;
  sc.seed = seed(kSaltSft);
  const auto res = training::train_sft(load(m_.base_checkpoint), suite(), sc);
  save_checkpoints(res.trace, "sft", m_.sft_checkpoints);
  write_trace(abs("traces/sft.jsonl"), res.trace, m_.sft_checkpoints);
  m_.traces["sft"] = "traces/sft.jsonl";
}

void Run::stage_rl(bool from_base) {
  auto& paths = from_base ? m_.rl_from_base_checkpoints : m_.rl_checkpoints;
  paths.clear();
  if (from_base && !cfg_.rl_from_base) return;
  const int block = rl_block_size(cfg_, suite().new_task);
  training::RlConfig rc = cfg_.rl;
  rc.block_size = block;
  rc.iterations = cfg_.rl_epochs * block;
  rc.seed = seed(from_base ? kSaltRlBase : kSaltRl);
  if (rc.iterations == 0) return;
  const std::string start =
      from_base || m_.sft_checkpoints.empty() ? m_.base_checkpoint : m_.sft_checkpoints.back();
  const auto res = training::train_rl_drgrpo(load(start), suite(), rc);
  const std::string prefix = from_base ? "rlbase" : "rl";
  save_checkpoints(res.trace, prefix, paths);
  const std::string key = from_base ? "rl_from_base" : "rl";
  write_trace(abs("traces/" + key + ".jsonl"), res.trace, paths);
  m_.traces[key] = "traces/" + key + ".jsonl";
}

void Run::stage_triplets() {
  m_.triplets.clear();
  fs::create_directories(abs("triplets"));
  for (auto h : cfg_.hypotheses) {
    const auto name = tasks::to_string(h);
    const auto ts = tasks::gen_triplets(suite(), h, cfg_.triplets_per_hypothesis, seed(kSaltTriplets));
    const std::string rel = "triplets/" + name + ".jsonl";
    tasks::write_triplets_jsonl(abs(rel), ts);
    m_.triplets[name] = rel;
  }
}

void Run::stage_dbm() {
  std::vector<tasks::Triplet> all;
  for (auto h : cfg_.hypotheses) {
    auto ts = tasks::read_triplets_jsonl(abs(m_.triplets.at(tasks::to_string(h))));
    all.insert(all.end(), ts.begin(), ts.end());
  }
  const auto items = eval_items();
  dbm::DbmConfig dc = cfg_.dbm;
  dc.seed = seed(kSaltDbm);
  for (const auto& ref : checkpoints_in_order(m_)) {
    const std::string rel = "circuits/" + ref.tag + ".json";
    // Circuits of an interrupted dbm stage are reused one by one.
    if (m_.circuits.count(ref.tag) && fs::exists(abs(rel))) continue;
    const auto params = load(ref.path);
    auto found = dbm::discover_circuit(params, all, dc, ref.tag);
    found.circuit.faithfulness =
        analysis::faithfulness(found.circuit, params, items, cfg_.analysis.mode, seed(kSaltAnalysis));
    fs::create_directories(abs("circuits"));
    dbm::save_circuit(found.circuit, abs(rel));
    std::string trace;
    for (const auto& p : found.trace) trace += dbm::to_json(p).dump() + "\n";
    const std::string trace_rel = "circuits/" + ref.tag + "_trace.jsonl";
    write_text(abs(trace_rel), trace);
    m_.circuits[ref.tag] = rel;
    m_.circuit_traces[ref.tag] = trace_rel;
    save();
  }
}

void Run::stage_analysis() {
  const auto& s = suite();
  const auto refs = checkpoints_in_order(m_);
  const auto base = load(m_.base_checkpoint);
  const auto base_circuit = dbm::load_circuit(abs(m_.circuits.at("base")));
  std::optional<std::vector<tasks::Triplet>> swaps;
  if (const auto it = m_.triplets.find(tasks::to_string(tasks::Hypothesis::kAnswerKeySwap)); it != m_.triplets.end())
    swaps = tasks::read_triplets_jsonl(abs(it->second));

  std::map<tasks::TaskType, std::vector<tasks::TaskItem>> retention;
  for (auto t : retention_types()) retention[t] = s.retention_of(t);

  std::vector<TrajectoryRow> rows;
  for (const auto& ref : refs) {
    const auto params = ref.tag == "base" ? base : load(ref.path);
    const auto circuit = dbm::load_circuit(abs(m_.circuits.at(ref.tag)));
    const model::CompiledModel m(params);
    TrajectoryRow r;
    r.stage = ref.stage;
    r.epoch = ref.epoch;
    r.checkpoint = ref.tag;
    r.nts = scoring::accuracy(m, s.new_task);
    if (!base_circuit.selected.empty()) r.retention_pct = analysis::retention_pct(base_circuit, circuit);
    r.faithfulness = circuit.faithfulness;
    if (swaps) r.dcm = analysis::dcm_score(params, circuit, *swaps);
    r.kl_drift = training::kl_drift(base, params, s.retention);
    for (const auto& [t, items] : retention)
      if (!items.empty()) r.retention_accuracy[tasks::to_string(t)] = scoring::accuracy(m, items);
    rows.push_back(std::move(r));
  }

  // Base against the final checkpoint of each objective; a missing stage falls back to its start.
  const std::string sft_tag = m_.sft_checkpoints.empty() ? "base" : fmt::format("sft_e{}", m_.sft_checkpoints.size());
  const std::string rl_tag = m_.rl_checkpoints.empty() ? sft_tag : fmt::format("rl_e{}", m_.rl_checkpoints.size());
  auto path_of = [&](const std::string& tag) {
    for (const auto& ref : refs)
      if (ref.tag == tag) return ref.path;
    throw ConfigError("no checkpoint tagged " + tag);
  };
  const auto sft = load(path_of(sft_tag));
  const auto rl = load(path_of(rl_tag));
  const auto c_sft = dbm::load_circuit(abs(m_.circuits.at(sft_tag)));
  const auto c_rl = dbm::load_circuit(abs(m_.circuits.at(rl_tag)));
  const auto items = eval_items();
  analysis::AnalysisConfig ac = cfg_.analysis;
  ac.seed = seed(kSaltAnalysis);
  const std::vector<tasks::Triplet> no_swaps;
  const auto cmp = analysis::compare({&base, &sft, &rl}, {&base_circuit, &c_sft, &c_rl}, items,
                                     swaps ? std::span<const tasks::Triplet>(*swaps) : std::span(no_swaps), ac);

  const auto targets = cfg_.sweep.resolved();
  const auto sweep = sweep_nts(rows, targets);
  json traj = json::array();
  for (const auto& r : rows) traj.push_back(to_json(r));
  json sw = json::array();
  for (const auto& r : sweep) sw.push_back(to_json(r));
  const json out = {{"model_config", base.config},
                    {"comparison_checkpoints", {{"base", "base"}, {"sft", sft_tag}, {"rl", rl_tag}}},
                    {"trajectory", traj},
                    {"comparison", analysis::to_json(cmp)},
                    {"sweep_targets", targets},
                    {"sweep", sw},
                    {"directional", to_json(directional_flags(sweep))}};
  write_text(abs("analysis/analysis.json"), dump(out));
  m_.analysis = "analysis/analysis.json";
}

void Run::stage_reports() { m_.reports = emit_reports(dir_, m_, cfg_.formats); }

}  // namespace

RunManifest run_pipeline(const MasterConfig& config, const fs::path& run_dir) {
  config.validate();
  const json config_json = config;
  const std::string run_id = fmt::format("{:016x}", fnv1a(config_json.dump()));
  fs::create_directories(run_dir);

  Run run(config, run_dir);
  run.init_manifest(config_json, run_id);
  if (fs::exists(run_dir / "manifest.json")) {
    RunManifest prev = load_manifest(run_dir);
    if (prev.run_id != run_id) {
      throw ConfigError(fmt::format("{} holds run {}, not {}; use a fresh directory", run_dir.string(), prev.run_id,
                                    run_id));
    }
    run.set_manifest(std::move(prev));
    // Keep the completed prefix whose artifacts are all present.
    auto& done = run.manifest().completed_stages;
    std::vector<std::string> keep;
    for (const auto& stage : kStages) {
      if (!run.intact(stage)) break;
      keep.push_back(stage);
    }
    done = keep;
  }

  const std::map<std::string, std::function<void()>> bodies{
      {"tasks", [&] { run.stage_tasks(); }},
      {"base", [&] { run.stage_base(); }},
      {"sft", [&] { run.stage_sft(); }},
      {"rl", [&] { run.stage_rl(false); }},
      {"rl_from_base", [&] { run.stage_rl(true); }},
      {"triplets", [&] { run.stage_triplets(); }},
      {"dbm", [&] { run.stage_dbm(); }},
      {"analysis", [&] { run.stage_analysis(); }},
      {"reports", [&] { run.stage_reports(); }},
  };
  for (const auto& stage : kStages) {
    if (run.manifest().completed(stage)) continue;
    try {
      bodies.at(stage)();
    } catch (const StageError&) {
      run.save();
      throw;
    } catch (const std::exception& e) {
      run.save();
      throw StageError(stage, e.what());
    }
    run.manifest().completed_stages.push_back(stage);
    run.save();
  }
  return run.manifest();
}

}  // namespace circuitlab::pipeline
