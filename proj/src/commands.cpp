// Copyright 2026 The negmerge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "external_eval.hpp"
#include "random.hpp"

namespace negmerge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt_num(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", x);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

json jnum(double x) { return std::isnan(x) ? json(nullptr) : json(x); }

json merge_manifest(const Workspace& ws, const PruningMask& mask, const std::string& source) {
  return {{"format", "negmerge-merge"},
          {"version", 1},
          {"source", source},
          {"merge", ws.config().merge.to_json()},
          {"tasks", ws.grid().tasks()},
          {"mask", mask_to_json(mask, ws.grid().tasks())},
          {"popcount", mask.popcount()}};
}

// merged.safetensors (manifest embedded) plus a readable merge.json beside it.
json write_merged(const Workspace& ws, const PruningMask& mask, json manifest) {
  const auto& dir = ws.config().output_dir;
  ensure_dir(dir);
  const auto delta = merge_with_mask(ws.grid(), mask, ws.config().merge);
  save_delta(dir / "merged.safetensors", delta, manifest);
  write_text(dir / "merge.json", manifest.dump(2) + "\n");
  return {{"merged", (dir / "merged.safetensors").string()}, {"manifest", (dir / "merge.json").string()}};
}

void require_experts(const Workspace& ws) {
  const auto missing = ws.missing_experts();
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    fail(ErrorCode::config, "fitness needs expert_accuracy for every task; missing: " + names);
  }
}

json accuracy_json(const TaskAccuracy& acc) {
  json j = json::object();
  for (const auto& [k, v] : acc) j[k] = jnum(v);
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Workspace

Workspace::Workspace(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.evaluator.kind == EvaluatorConfig::Kind::builtin) {
    bed_ = cfg_.evaluator.testbed ? make_testbed(*cfg_.evaluator.testbed) : import_testbed(*cfg_.evaluator.testbed_dir);
  }
  std::vector<AdapterCheckpoint> ckpts;
  if (cfg_.adapters.empty()) {
    ckpts = bed_->adapters;
    experts_ = bed_->experts;
  } else {
    const auto naming = NamingScheme::from_json(cfg_.naming);
    experts_.source = ExpertScores::Source::supplied;
    for (const auto& entry : cfg_.adapters) {
      auto ckpt = load_adapter(entry.path, naming);
      ckpt.task_name = entry.task;
      ckpts.push_back(std::move(ckpt));
      if (entry.expert_accuracy) {
        experts_.accuracy[entry.task] = *entry.expert_accuracy;
      } else if (bed_ && bed_->experts.accuracy.count(entry.task)) {
        experts_.accuracy[entry.task] = bed_->experts.accuracy.at(entry.task);
      }
    }
  }
  grid_ = ModuleGrid::build(ckpts);
}

Workspace::~Workspace() = default;

EvaluatorPool& Workspace::pool() {
  if (pool_.workers.empty()) {
    for (std::size_t i = 0; i < cfg_.parallel; ++i) {
      if (bed_) {
        evaluators_.push_back(std::make_unique<BuiltinEvaluator>(*bed_, cfg_.subsample));
      } else {
        ExternalEvalConfig ec;
        ec.command = cfg_.evaluator.command;
        ec.timeout_s = cfg_.evaluator.timeout_s;
        ec.tasks = grid_.tasks();
        ec.subsample = cfg_.subsample;
        ec.workdir = cfg_.output_dir / "candidates";
        evaluators_.push_back(std::make_unique<ExternalEvaluator>(ec, i));
      }
      pool_.workers.push_back(evaluators_.back().get());
    }
  }
  return pool_;
}

std::vector<std::string> Workspace::missing_experts() const {
  std::vector<std::string> out;
  for (const auto& t : grid_.tasks()) {
    if (!experts_.accuracy.count(t)) out.push_back(t);
  }
  return out;
}

std::string search_header(const SearchConfig& cfg) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "pop=%zu gens=%zu sigma=%g k=%g", cfg.pop, cfg.generations, cfg.sigma0,
                cfg.max_prune);
  return buf;
}

// ---------------------------------------------------------------------------
// Commands

json cmd_merge(Workspace& ws, const std::optional<fs::path>& mask_path) {
  const auto& grid = ws.grid();
  auto mask = PruningMask::zeros(grid.num_layers(), grid.num_tasks());
  if (mask_path) {
    mask = read_mask(*mask_path);
    if (mask.num_layers != grid.num_layers() || mask.num_tasks != grid.num_tasks()) {
      fail(ErrorCode::shape, "mask is " + std::to_string(mask.num_layers) + "x" + std::to_string(mask.num_tasks) +
                                 " but the adapters form a " + std::to_string(grid.num_layers()) + "x" +
                                 std::to_string(grid.num_tasks()) + " grid");
    }
  }
  auto files = write_merged(ws, mask, merge_manifest(ws, mask, mask_path ? "mask" : "baseline"));
  return {{"command", "merge"}, {"method", method_name(ws.config().merge.method)},
          {"popcount", mask.popcount()}, {"files", files}};
}

json cmd_search(Workspace& ws, const SearchOptions& opts) {
  require_experts(ws);
  const auto& cfg = ws.config();
  const auto& dir = cfg.output_dir;
  ensure_dir(dir);
  const auto header = search_header(cfg.search);
  info(header);

  SearchHooks hooks;
  if (opts.resume) {
    if (!fs::exists(*opts.resume)) fail(ErrorCode::config, "checkpoint " + opts.resume->string() + " does not exist");
    hooks.checkpoint = *opts.resume;
  } else {
    hooks.checkpoint = dir / "checkpoint.json";
    std::error_code ec;
    fs::remove(*hooks.checkpoint, ec);
  }
  hooks.on_generation = [](const GenerationRecord& r) {
    info("gen " + std::to_string(r.generation) + ": best=" + fmt_num(r.best_val_fitness) +
         " best_ever=" + fmt_num(r.best_ever_fitness) + " popcount=" + std::to_string(r.popcount));
  };
  const auto result = run_enmp(ws.grid(), cfg.merge, cfg.search, ws.pool(), ws.experts(), hooks);

  std::string trace = "generation,best_val_fitness,best_ever_fitness,popcount\n";
  std::string timing = "generation,seconds\n";
  for (const auto& r : result.trace) {
    trace += std::to_string(r.generation) + "," + fmt_num(r.best_val_fitness) + "," + fmt_num(r.best_ever_fitness) +
             "," + std::to_string(r.popcount) + "\n";
    char sec[32];
    std::snprintf(sec, sizeof(sec), "%.6f", r.seconds);
    timing += std::to_string(r.generation) + "," + sec + "\n";
  }
  write_text(dir / "trace.csv", trace);
  write_text(dir / "timing.csv", timing);
  write_mask(dir / "best_mask.json", result.best_mask, ws.grid().tasks());

  auto manifest = merge_manifest(ws, result.best_mask, "search");
  manifest["search"] = cfg.search.to_json();
  manifest["search"]["subsample"] = cfg.subsample ? json(*cfg.subsample) : json(nullptr);
  manifest["best_fitness"] = jnum(result.best_fitness);
  manifest["baseline_fitness"] = jnum(result.baseline_fitness);
  auto files = write_merged(ws, result.best_mask, manifest);
  files["trace"] = (dir / "trace.csv").string();
  files["timing"] = (dir / "timing.csv").string();
  files["best_mask"] = (dir / "best_mask.json").string();
  files["checkpoint"] = hooks.checkpoint->string();

  json report = {{"command", "search"},
                 {"header", header},
                 {"baseline_fitness", jnum(result.baseline_fitness)},
                 {"best_fitness", jnum(result.best_fitness)},
                 {"delta", jnum(result.best_fitness - result.baseline_fitness)},
                 {"popcount", result.best_mask.popcount()},
                 {"budget", prune_budget(ws.grid().num_units(), cfg.search.max_prune)},
                 {"evaluations", result.evaluations},
                 {"best_accuracy", accuracy_json(result.best_accuracy)},
                 {"baseline_accuracy", accuracy_json(result.baseline_accuracy)},
                 {"best_mask", mask_to_json(result.best_mask, ws.grid().tasks())},
                 {"files", files}};
  write_text(dir / "search.json", report.dump(2) + "\n");
  return report;
}

json cmd_inspect(Workspace& ws, const InspectOptions& opts) {
  require_experts(ws);
  const auto& cfg = ws.config();
  const auto& grid = ws.grid();
  const auto& dir = cfg.output_dir;
  ensure_dir(dir);
  const std::size_t T = grid.num_tasks();

  switch (opts.mode) {
    case InspectMode::leave_one_out: {
      const auto loo = leave_one_out(grid, cfg.merge, ws.pool(), ws.experts());
      std::string csv = "layer,task,impact\n";
      json rows = json::array();
      for (std::size_t l = 0; l < grid.num_layers(); ++l) {
        json row = json::array();
        for (std::size_t t = 0; t < T; ++t) {
          const double v = loo.impact(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(t));
          csv += std::to_string(l) + "," + grid.tasks()[t] + "," + fmt_num(v) + "\n";
          row.push_back(jnum(v));
        }
        rows.push_back(row);
      }
      write_text(dir / "leave_one_out.csv", csv);
      return {{"command", "inspect"}, {"mode", "leave-one-out"}, {"baseline_fitness", jnum(loo.baseline)},
              {"tasks", grid.tasks()}, {"impact", rows}, {"files", {{"csv", (dir / "leave_one_out.csv").string()}}}};
    }
    case InspectMode::greedy: {
      const auto g = greedy_prune(grid, cfg.merge, ws.pool(), ws.experts());
      write_mask(dir / "greedy_mask.json", g.mask, grid.tasks());
      const bool below = g.fitness < g.analysis.baseline;
      if (below) warn("greedy pruning scores below the unpruned merge (over-pruning)");
      json report = {{"command", "inspect"},
                     {"mode", "greedy"},
                     {"fitness", jnum(g.fitness)},
                     {"baseline_fitness", jnum(g.analysis.baseline)},
                     {"delta", jnum(g.fitness - g.analysis.baseline)},
                     {"below_baseline", below},
                     {"popcount", g.mask.popcount()},
                     {"mask", mask_to_json(g.mask, grid.tasks())},
                     {"files", {{"mask", (dir / "greedy_mask.json").string()}}}};
      write_text(dir / "greedy.json", report.dump(2) + "\n");
      return report;
    }
    case InspectMode::random: {
      if (opts.seeds < 1) fail(ErrorCode::config, "random inspection needs at least one seed");
      if (!(opts.sparsity >= 0.0 && opts.sparsity <= 1.0)) fail(ErrorCode::config, "sparsity must lie in [0, 1]");
      std::vector<PruningMask> masks{PruningMask::zeros(grid.num_layers(), T)};
      for (std::size_t i = 0; i < opts.seeds; ++i) {
        Rng rng(derive_stream(cfg.search.seed + i, 0x7A4D));
        masks.push_back(reshape_mask(random_prune(grid.num_units(), opts.sparsity, rng), grid.num_layers(), T));
      }
      const auto scores = evaluate_masks(grid, cfg.merge, masks, std::vector<std::uint64_t>(masks.size(), 0),
                                         ws.pool(), ws.experts());
      std::string csv = "seed,popcount,fitness\n";
      double sum = 0.0;
      for (std::size_t i = 0; i < opts.seeds; ++i) {
        csv += std::to_string(cfg.search.seed + i) + "," + std::to_string(masks[i + 1].popcount()) + "," +
               fmt_num(scores[i + 1].fitness) + "\n";
        sum += scores[i + 1].fitness;
      }
      const double mean = sum / static_cast<double>(opts.seeds);
      double var = 0.0;
      for (std::size_t i = 0; i < opts.seeds; ++i) var += std::pow(scores[i + 1].fitness - mean, 2);
      const double stddev = opts.seeds > 1 ? std::sqrt(var / static_cast<double>(opts.seeds - 1)) : 0.0;
      write_text(dir / "random_prune.csv", csv);
      return {{"command", "inspect"},
              {"mode", "random"},
              {"sparsity", opts.sparsity},
              {"seeds", opts.seeds},
              {"popcount", masks[1].popcount()},
              {"mean_fitness", jnum(mean)},
              {"std_fitness", jnum(stddev)},
              {"baseline_fitness", jnum(scores[0].fitness)},
              {"delta", jnum(mean - scores[0].fitness)},
              {"files", {{"csv", (dir / "random_prune.csv").string()}}}};
    }
  }
  fail(ErrorCode::internal, "unhandled inspect mode");
}

json cmd_eval(Workspace& ws, const fs::path& delta_path) {
  const auto loaded = load_delta(delta_path);
  TaskAccuracy acc;
  if (const auto* bed = ws.testbed()) {
    acc = eval_builtin(loaded.delta, *bed);
  } else {
    acc = dynamic_cast<ExternalEvaluator&>(*ws.pool().workers[0]).evaluate_path(delta_path);
  }
  json rows = json::array();
  double norm_sum = 0.0;
  std::size_t norm_count = 0;
  for (const auto& [task, a] : acc) {
    json row = {{"task", task}, {"accuracy", jnum(a)}};
    auto it = ws.experts().accuracy.find(task);
    if (it != ws.experts().accuracy.end()) {
      const double n = normalized_accuracy(a, it->second);
      row["expert"] = it->second;
      row["normalized"] = jnum(n);
      norm_sum += n;
      ++norm_count;
    } else {
      warn("no expert score for task '" + task + "'; reporting absolute accuracy only");
      row["expert"] = nullptr;
      row["normalized"] = nullptr;
    }
    rows.push_back(row);
  }
  json report = {{"command", "eval"}, {"delta", delta_path.string()}, {"rows", rows}};
  report["mean_normalized"] = norm_count == acc.size() && norm_count > 0 ? jnum(norm_sum / static_cast<double>(norm_count)) : json(nullptr);
  return report;
}

json cmd_export_testbed(const TestbedSpec& spec, const fs::path& dir) {
  const auto bed = make_testbed(spec);
  export_testbed(bed, dir);
  std::vector<std::size_t> planted;
  for (std::size_t u = 0; u < bed.planted.size(); ++u) {
    if (bed.planted[u]) planted.push_back(u);
  }
  return {{"command", "testbed-export"},
          {"dir", dir.string()},
          {"tasks", bed.tasks},
          {"hidden_dim", bed.hidden_dim},
          {"expert_accuracy", bed.experts.accuracy},
          {"planted_negatives", planted}};
}

}  // namespace negmerge
