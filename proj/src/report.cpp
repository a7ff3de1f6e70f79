// Report files rendered from the stored analysis results.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "circuitlab/errors.hpp"
#include "circuitlab/pipeline.hpp"

namespace circuitlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_integer()) return fmt::format("{}", v.get<long long>());
  if (v.is_number()) return fmt::format("{}", v.get<double>());
  return v.get<std::string>();
}

std::string csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  auto line = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
    return s + "\n";
  };
  std::string out = line(header);
  for (const auto& r : rows) out += line(r);
  return out;
}

// ---- minimal SVG line/scatter plots ----

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  bool lines = true;
};

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 30, B = 45;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  out += fmt::format("<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n", W / 2, title);
  out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    out += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{:.3g}</text>\n", px(xv), H - B + 14, xv);
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", L - 4, py(yv) + 4, yv);
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (L + W - R) / 2, H - 8, xlabel);
  out += fmt::format("<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
                     (T + H - B) / 2, (T + H - B) / 2, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % std::size(kColors)];
    if (s.lines && s.points.size() > 1) {
      std::string pts;
      for (const auto& [x, y] : s.points) pts += fmt::format("{:.2f},{:.2f} ", px(x), py(y));
      pts.pop_back();
      out += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color, pts);
    }
    for (const auto& [x, y] : s.points)
      out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2.5\" fill=\"{}\"/>\n", px(x), py(y), color);
    out += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n", W - R - 110, T + 12 + 14 * k, color,
                       s.name);
  }
  return out + "</svg>\n";
}

}  // namespace

std::vector<std::string> emit_reports(const fs::path& run_dir, const RunManifest& manifest,
                                      const std::set<std::string>& formats) {
  if (manifest.analysis.empty()) throw ConfigError("reports: run has no analysis results");
  for (const auto& f : formats)
    if (f != "csv" && f != "json" && f != "svg") throw ConfigError("reports: unknown format '" + f + "'");
  json a;
  {
    std::ifstream in(run_dir / manifest.analysis, std::ios::binary);
    if (!in) throw ConfigError("reports: cannot read " + (run_dir / manifest.analysis).string());
    a = json::parse(in);
  }
  const json& traj = a.at("trajectory");
  const json& cmp = a.at("comparison");
  const json& sweep = a.at("sweep");

  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    const std::string rel = "reports/" + name;
    write_file(run_dir / rel, text);
    written.push_back(rel);
  };
  const std::vector<std::string> subtypes{"copy", "reverse", "successor"};

  if (formats.count("json")) {
    emit("trajectory.json", traj.dump(2) + "\n");
    emit("comparison.json", cmp.dump(2) + "\n");
    emit("overlap.json", cmp.at("overlap").dump(2) + "\n");
    emit("sweep.json", json{{"targets", a.at("sweep_targets")}, {"rows", sweep}}.dump(2) + "\n");
    emit("directional.json", a.at("directional").dump(2) + "\n");
  }

  if (formats.count("csv")) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : traj) {
      std::vector<std::string> row{cell(r["stage"]),        cell(r["epoch"]),        cell(r["checkpoint"]),
                                   cell(r["nts"]),          cell(r["retention_pct"]), cell(r["faithfulness"]),
                                   cell(r["dcm"]),          cell(r["kl_drift"])};
      for (const auto& s : subtypes)
        row.push_back(r["retention_accuracy"].contains(s) ? cell(r["retention_accuracy"][s]) : "");
      rows.push_back(std::move(row));
    }
    emit("trajectory.csv", csv({"stage", "epoch", "checkpoint", "nts", "retention_pct", "faithfulness", "dcm",
                                "kl_drift", "acc_copy", "acc_reverse", "acc_successor"},
                               rows));

    const std::vector<std::string> head_cols{"layer",    "head",    "m_base",  "m_sft",  "m_rl",   "delta_sft",
                                             "delta_rl", "nec_base", "nec_sft", "nec_rl", "suf_base", "suf_sft",
                                             "suf_rl",   "in_base", "in_sft",  "in_rl"};
    rows.clear();
    for (const auto& h : cmp.at("heads")) {
      std::vector<std::string> row;
      for (const auto& c : head_cols) row.push_back(cell(h.at(c)));
      rows.push_back(std::move(row));
    }
    emit("heads.csv", csv(head_cols, rows));

    rows.clear();
    for (const char* obj : {"sft", "rl"})
      for (const auto& l : cmp.at("layer_profile").at(obj))
        rows.push_back({obj, cell(l["layer"]), cell(l["retained"]), cell(l["forgotten"]), cell(l["new"])});
    emit("layer_profile.csv", csv({"objective", "layer", "retained", "forgotten", "new"}, rows));

    rows.clear();
    for (const auto& h : cmp.at("heads"))
      rows.push_back({cell(h["layer"]), cell(h["head"]), cell(h["delta_sft"]), cell(h["nec_sft"]),
                      cell(h["delta_rl"]), cell(h["nec_rl"])});
    emit("scatter.csv", csv({"layer", "head", "delta_sft", "nec_sft", "delta_rl", "nec_rl"}, rows));

    rows.clear();
    for (const auto& s : sweep)
      rows.push_back({cell(s["objective"]), cell(s["target"]), cell(s["reached"]), cell(s["checkpoint"]),
                      cell(s["epoch"]), cell(s["nts"]), cell(s["retention_pct"])});
    emit("sweep.csv", csv({"objective", "target", "reached", "checkpoint", "epoch", "nts", "retention_pct"}, rows));
  }

  if (formats.count("svg")) {
    // Retention per objective over epochs, each curve starting at the base row.
    std::vector<Series> retention;
    std::vector<std::string> stages;
    for (const auto& r : traj) {
      const auto st = r["stage"].get<std::string>();
      if (st != "base" && std::find(stages.begin(), stages.end(), st) == stages.end()) stages.push_back(st);
    }
    const json* base_row = nullptr;
    for (const auto& r : traj)
      if (r["stage"] == "base") base_row = &r;
    for (const auto& st : stages) {
      Series s{st, {}};
      if (base_row && !(*base_row)["retention_pct"].is_null())
        s.points.emplace_back(0.0, (*base_row)["retention_pct"].get<double>());
      for (const auto& r : traj)
        if (r["stage"] == st && !r["retention_pct"].is_null())
          s.points.emplace_back(r["epoch"].get<double>(), r["retention_pct"].get<double>());
      retention.push_back(std::move(s));
    }
    emit("trajectory.svg", svg_plot("Circuit retention", "epoch", "retention %", retention));

    std::vector<Series> tradeoff;
    for (const auto& st : stages) {
      Series s{st, {}};
      for (const auto& r : sweep)
        if (r["objective"] == st && r["reached"].get<bool>() && !r["retention_pct"].is_null())
          s.points.emplace_back(r["nts"].get<double>(), r["retention_pct"].get<double>());
      tradeoff.push_back(std::move(s));
    }
    emit("tradeoff.svg", svg_plot("Retention at NTS targets", "NTS", "retention %", tradeoff));

    Series sft{"sft", {}, false}, rl{"rl", {}, false};
    for (const auto& h : cmp.at("heads")) {
      sft.points.emplace_back(h["delta_sft"].get<double>(), h["nec_sft"].get<double>());
      rl.points.emplace_back(h["delta_rl"].get<double>(), h["nec_rl"].get<double>());
    }
    emit("scatter.svg", svg_plot("Necessity against mask shift", "mask shift", "necessity", {sft, rl}));
  }
  return written;
}

}  // namespace circuitlab::pipeline
