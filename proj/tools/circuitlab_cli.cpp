// circuitlab command-line interface. Every subcommand takes --config, --seed
// and --out; outputs land under --out and are listed in <out>/outputs.json
// (the pipeline keeps its own manifest.json).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "circuitlab/analysis.hpp"
#include "circuitlab/checkpoint.hpp"
#include "circuitlab/dbm.hpp"
#include "circuitlab/errors.hpp"
#include "circuitlab/pipeline.hpp"
#include "circuitlab/planted.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace circuitlab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

template <class T>
T load_config(const Common& c) {
  if (c.config.empty()) return T{};
  try {
    return read_json_file(c.config).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", c.config, e.what()));
  }
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void write_outputs(const fs::path& out, const std::string& command, const json& config, std::uint64_t seed,
                   const json& outputs) {
  write_json(out / "outputs.json", {{"command", command}, {"config", config}, {"seed", seed}, {"outputs", outputs}});
}

std::vector<tasks::TaskItem> read_items(const std::string& path, const char* which = "new_task.jsonl") {
  if (fs::is_directory(path)) return tasks::read_items_jsonl(fs::path(path) / which);
  return tasks::read_items_jsonl(path);
}

std::vector<tasks::Triplet> read_triplets(const std::vector<std::string>& paths) {
  std::vector<tasks::Triplet> all;
  for (const auto& p : paths) {
    auto ts = tasks::read_triplets_jsonl(p);
    all.insert(all.end(), ts.begin(), ts.end());
  }
  return all;
}

void save_training(const fs::path& out, const training::TrainResult& res, const char* prefix) {
  fs::create_directories(out);
  std::vector<std::string> ckpts;
  for (std::size_t i = 0; i < res.trace.checkpoints.size(); ++i) {
    ckpts.push_back(fmt::format("{}_e{}.ckpt", prefix, i + 1));
    model::save_checkpoint(res.trace.checkpoints[i], out / ckpts.back());
  }
  model::save_checkpoint(res.params, out / "final.ckpt");
  std::ofstream trace(out / "trace.jsonl", std::ios::binary | std::ios::trunc);
  trace << training::to_json(res.trace.initial).dump() << "\n";
  for (auto rec : res.trace.records) {
    if (rec.checkpoint) rec.checkpoint_path = ckpts.at(static_cast<std::size_t>(*rec.checkpoint));
    trace << training::to_json(rec).dump() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitlab: circuit discovery and retention analysis for fine-tuned transformers"};
  app.require_subcommand(1);

  // gen-tasks
  Common gen;
  auto* gen_cmd = app.add_subcommand("gen-tasks", "Generate the new-task and retention item suite");
  add_common(gen_cmd, gen);

  // init-model
  Common init;
  bool planted = false;
  auto* init_cmd = app.add_subcommand("init-model", "Write a randomly initialized or planted checkpoint");
  add_common(init_cmd, init);
  init_cmd->add_flag("--planted", planted, "Build the hand-wired planted-circuit model (config is a planted spec)");

  // train sft | rl
  auto* train_cmd = app.add_subcommand("train", "Fine-tune a checkpoint");
  train_cmd->require_subcommand(1);
  Common sft, rl;
  std::string sft_model, sft_tasks, rl_model, rl_tasks;
  auto* sft_cmd = train_cmd->add_subcommand("sft", "Supervised fine-tuning on the new-task items");
  add_common(sft_cmd, sft);
  sft_cmd->add_option("--model", sft_model, "Starting checkpoint")->required()->check(CLI::ExistingFile);
  sft_cmd->add_option("--tasks", sft_tasks, "Task directory or items JSONL")->required()->check(CLI::ExistingPath);
  auto* rl_cmd = train_cmd->add_subcommand("rl", "Dr.GRPO fine-tuning with exact-match rewards");
  add_common(rl_cmd, rl);
  rl_cmd->add_option("--model", rl_model, "Starting checkpoint")->required()->check(CLI::ExistingFile);
  rl_cmd->add_option("--tasks", rl_tasks, "Task directory or items JSONL")->required()->check(CLI::ExistingPath);

  // eval
  Common ev;
  std::string ev_model, ev_tasks, ev_circuit;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint, optionally circuit-only");
  add_common(eval_cmd, ev);
  eval_cmd->add_option("--model", ev_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--tasks", ev_tasks, "Task directory or items JSONL")->required()->check(CLI::ExistingPath);
  eval_cmd->add_option("--circuit", ev_circuit, "Circuit JSON; heads outside it are ablated")
      ->check(CLI::ExistingFile);

  // dbm
  Common dc;
  std::string dbm_model;
  std::vector<std::string> dbm_triplets;
  auto* dbm_cmd = app.add_subcommand("dbm", "Discover a circuit with differentiable binary masks");
  add_common(dbm_cmd, dc);
  dbm_cmd->add_option("--model", dbm_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  dbm_cmd->add_option("--triplets", dbm_triplets, "Triplet JSONL files")->required()->check(CLI::ExistingFile);

  // compare
  Common cmp;
  std::vector<std::string> cmp_models, cmp_circuits, cmp_swaps;
  std::string cmp_tasks;
  auto* cmp_cmd = app.add_subcommand("compare", "Compare base, SFT and RL circuits");
  add_common(cmp_cmd, cmp);
  cmp_cmd->add_option("--models", cmp_models, "Base, SFT and RL checkpoints")->required()->expected(3);
  cmp_cmd->add_option("--circuits", cmp_circuits, "Base, SFT and RL circuits")->required()->expected(3);
  cmp_cmd->add_option("--tasks", cmp_tasks, "Task directory or items JSONL")->required()->check(CLI::ExistingPath);
  cmp_cmd->add_option("--answer-swaps", cmp_swaps, "Answer-key-swap triplet JSONL files");

  // sweep
  Common sw;
  std::string sweep_run;
  std::vector<double> sweep_targets;
  auto* sweep_cmd = app.add_subcommand("sweep", "Select checkpoints at NTS targets from a pipeline run");
  add_common(sweep_cmd, sw);
  sweep_cmd->add_option("--run", sweep_run, "Pipeline run directory")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--targets", sweep_targets, "NTS targets (default: the run's sweep config)");

  // report
  Common rep;
  std::vector<std::string> formats;
  auto* report_cmd = app.add_subcommand("report", "Re-emit the report files of a pipeline run (--out is the run)");
  add_common(report_cmd, rep);
  report_cmd->add_option("--formats", formats, "Subset of csv, json, svg (default: the run's config)");

  // pipeline
  Common pipe;
  auto* pipe_cmd = app.add_subcommand("pipeline", "Run or resume every stage end to end");
  add_common(pipe_cmd, pipe);

  CLI11_PARSE(app, argc, argv);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (*gen_cmd) {
      auto cfg = load_config<tasks::GenConfig>(gen);
      const std::uint64_t seed = gen.seed.value_or(0);
      const auto suite = tasks::gen_suite(cfg, seed);
      fs::create_directories(gen.out);
      tasks::write_items_jsonl(fs::path(gen.out) / "new_task.jsonl", suite.new_task);
      tasks::write_items_jsonl(fs::path(gen.out) / "retention.jsonl", suite.retention);
      write_outputs(gen.out, stage, cfg, seed, {{"new_task", "new_task.jsonl"}, {"retention", "retention.jsonl"}});
      fmt::print("{} new-task items, {} retention items\n", suite.new_task.size(), suite.retention.size());
    } else if (*init_cmd) {
      json cfg_echo;
      std::uint64_t seed = 0;
      model::ModelParams params;
      if (planted) {
        auto spec = load_config<model::PlantedSpec>(init);
        if (init.seed) spec.config.seed = *init.seed;
        seed = spec.config.seed;
        auto pm = model::build_planted_model(spec);
        params = std::move(pm.params);
        cfg_echo = spec;
      } else {
        auto cfg = load_config<model::ModelConfig>(init);
        if (init.seed) cfg.seed = *init.seed;
        seed = cfg.seed;
        params = model::init_params(cfg);
        cfg_echo = cfg;
      }
      fs::create_directories(init.out);
      model::save_checkpoint(params, fs::path(init.out) / "model.ckpt");
      write_outputs(init.out, stage, cfg_echo, seed, {{"model", "model.ckpt"}});
      fmt::print("wrote {} parameters\n", params.parameter_count());
    } else if (*sft_cmd) {
      stage = "train sft";
      auto cfg = load_config<training::SftConfig>(sft);
      if (sft.seed) cfg.seed = *sft.seed;
      const auto items = read_items(sft_tasks);
      const auto res = training::train_sft_items(model::load_checkpoint(sft_model), items, items, cfg);
      save_training(sft.out, res, "sft");
      write_outputs(sft.out, stage, cfg, cfg.seed, {{"final", "final.ckpt"}, {"trace", "trace.jsonl"}});
      fmt::print("NTS {} -> {}\n", res.trace.initial.nts,
                 res.trace.records.empty() ? res.trace.initial.nts : res.trace.records.back().nts);
    } else if (*rl_cmd) {
      stage = "train rl";
      auto cfg = load_config<training::RlConfig>(rl);
      if (rl.seed) cfg.seed = *rl.seed;
      const auto items = read_items(rl_tasks);
      const auto res = training::train_rl_items(model::load_checkpoint(rl_model), items, items, cfg);
      save_training(rl.out, res, "rl");
      write_outputs(rl.out, stage, cfg, cfg.seed, {{"final", "final.ckpt"}, {"trace", "trace.jsonl"}});
      fmt::print("NTS {} -> {}\n", res.trace.initial.nts,
                 res.trace.records.empty() ? res.trace.initial.nts : res.trace.records.back().nts);
    } else if (*eval_cmd) {
      auto cfg = load_config<analysis::AnalysisConfig>(ev);
      if (ev.seed) cfg.seed = *ev.seed;
      const auto items = read_items(ev_tasks);
      std::optional<dbm::Circuit> circuit;
      if (!ev_circuit.empty()) circuit = dbm::load_circuit(ev_circuit);
      const auto r = analysis::eval_task(model::load_checkpoint(ev_model), items, circuit ? &*circuit : nullptr,
                                         cfg.mode, cfg.seed);
      write_json(fs::path(ev.out) / "eval.json", analysis::to_json(r));
      write_outputs(ev.out, stage, cfg, cfg.seed, {{"eval", "eval.json"}});
      fmt::print("score {}\n", r.score);
    } else if (*dbm_cmd) {
      auto cfg = load_config<dbm::DbmConfig>(dc);
      if (dc.seed) cfg.seed = *dc.seed;
      const auto triplets = read_triplets(dbm_triplets);
      const auto found =
          dbm::discover_circuit(model::load_checkpoint(dbm_model), triplets, cfg, fs::path(dbm_model).stem().string());
      fs::create_directories(dc.out);
      dbm::save_circuit(found.circuit, fs::path(dc.out) / "circuit.json");
      std::ofstream trace(fs::path(dc.out) / "trace.jsonl", std::ios::binary | std::ios::trunc);
      for (const auto& p : found.trace) trace << dbm::to_json(p).dump() << "\n";
      write_outputs(dc.out, stage, cfg, cfg.seed, {{"circuit", "circuit.json"}, {"trace", "trace.jsonl"}});
      fmt::print("{} heads selected{}\n", found.circuit.selected.size(),
                 found.circuit.discovery_failed ? " (discovery failed: " + found.circuit.failure_reason + ")" : "");
    } else if (*cmp_cmd) {
      auto cfg = load_config<analysis::AnalysisConfig>(cmp);
      if (cmp.seed) cfg.seed = *cmp.seed;
      const auto base = model::load_checkpoint(cmp_models[0]);
      const auto sftp = model::load_checkpoint(cmp_models[1]);
      const auto rlp = model::load_checkpoint(cmp_models[2]);
      const auto cb = dbm::load_circuit(cmp_circuits[0]);
      const auto cs = dbm::load_circuit(cmp_circuits[1]);
      const auto cr = dbm::load_circuit(cmp_circuits[2]);
      auto items = read_items(cmp_tasks);
      if (static_cast<int>(items.size()) > cfg.eval_items) items.resize(static_cast<std::size_t>(cfg.eval_items));
      const auto swaps = read_triplets(cmp_swaps);
      const auto r = analysis::compare({&base, &sftp, &rlp}, {&cb, &cs, &cr}, items, swaps, cfg);
      write_json(fs::path(cmp.out) / "comparison.json", analysis::to_json(r));
      write_outputs(cmp.out, stage, cfg, cfg.seed, {{"comparison", "comparison.json"}});
      fmt::print("vulnerable heads: {}\n", r.vulnerable.size());
    } else if (*sweep_cmd) {
      const auto manifest = pipeline::load_manifest(sweep_run);
      auto targets = sweep_targets;
      if (targets.empty()) targets = manifest.config.get<pipeline::MasterConfig>().sweep.resolved();
      const auto rows = pipeline::sweep_nts(sweep_run, manifest, targets);
      json arr = json::array();
      std::string csv = "objective,target,reached,checkpoint,epoch,nts,retention_pct\n";
      for (const auto& r : rows) {
        arr.push_back(pipeline::to_json(r));
        csv += fmt::format("{},{},{},{},{},{},{}\n", r.objective, r.target, r.reached ? 1 : 0,
                           r.reached ? r.checkpoint : "", r.reached ? fmt::format("{}", r.epoch) : "",
                           r.reached ? fmt::format("{}", r.nts) : "",
                           r.reached && r.retention_pct ? fmt::format("{}", *r.retention_pct) : "");
      }
      fs::create_directories(sw.out);
      write_json(fs::path(sw.out) / "sweep.json", {{"targets", targets}, {"rows", arr}});
      std::ofstream(fs::path(sw.out) / "sweep.csv", std::ios::binary | std::ios::trunc) << csv;
      write_outputs(sw.out, stage, {{"run", sweep_run}, {"targets", targets}}, manifest.seed,
                    {{"sweep_json", "sweep.json"}, {"sweep_csv", "sweep.csv"}});
      fmt::print("{}", csv);
    } else if (*report_cmd) {
      auto manifest = pipeline::load_manifest(rep.out);
      std::set<std::string> fm(formats.begin(), formats.end());
      if (fm.empty()) fm = manifest.config.get<pipeline::MasterConfig>().formats;
      const auto written = pipeline::emit_reports(rep.out, manifest, fm);
      for (const auto& w : written) fmt::print("{}\n", w);
    } else if (*pipe_cmd) {
      auto cfg = pipe.config.empty() ? pipeline::MasterConfig{} : pipeline::load_master_config(pipe.config);
      if (pipe.seed) cfg.seed = *pipe.seed;
      const auto m = pipeline::run_pipeline(cfg, pipe.out);
      fmt::print("run {} complete: {} checkpoints, {} circuits, {} report files\n", m.run_id,
                 pipeline::checkpoints_in_order(m).size(), m.circuits.size(), m.reports.size());
    }
  } catch (const StageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: stage '{}' failed: {}\n", stage, e.what());
    return 1;
  }
  return 0;
}
