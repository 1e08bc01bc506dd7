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

// negmerge command-line tool. Everything goes through the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "negmerge/negmerge.h"

using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string output;
  bool json_out = false;
  bool quiet = false;

  std::optional<std::size_t> pop, gens, parallel, subsample;
  std::optional<double> sigma, max_prune;
  std::optional<std::uint64_t> seed;
  std::string resume;

  std::string mask;
  std::string mode = "leave-one-out";
  double sparsity = 0.167;
  std::size_t seeds = 3;
  std::string delta;

  std::string spec_path;
  std::string export_dir;
};

// Raised after a C API failure; carries the status for the exit code.
struct ApiFailure {
  nm_status status;
};

void check(nm_status st) {
  if (st != NM_OK) {
    std::cerr << "error (" << nm_status_name(st) << "): " << nm_last_error() << '\n';
    throw ApiFailure{st};
  }
}

json take_report(char* raw) {
  json j = json::parse(raw);
  nm_string_free(raw);
  return j;
}

std::string fmt(const json& v) {
  if (v.is_null()) return "n/a";
  if (v.is_number_float()) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v.get<double>());
    return buf;
  }
  return v.dump();
}

std::string mask_grid(const json& mask) {
  std::string out;
  const auto& tasks = mask.at("tasks");
  out += "        ";
  for (const auto& t : tasks) out += " " + t.get<std::string>();
  out += "\n";
  std::size_t l = 0;
  for (const auto& row : mask.at("rows")) {
    char label[32];
    std::snprintf(label, sizeof(label), "layer %-2zu", l++);
    out += label;
    const auto bits = row.get<std::string>();
    for (std::size_t t = 0; t < bits.size(); ++t) {
      const std::size_t width = tasks[t].get<std::string>().size();
      out += " " + std::string(width - 1, ' ') + (bits[t] == '1' ? "x" : ".");
    }
    out += "\n";
  }
  return out;
}

void print_report(const json& r) {
  const auto cmd = r.at("command").get<std::string>();
  if (cmd == "merge") {
    std::cout << "merged (" << r.at("method").get<std::string>() << ", " << r.at("popcount")
              << " units pruned) -> " << r.at("files").at("merged").get<std::string>() << '\n';
  } else if (cmd == "search") {
    std::cout << "baseline fitness " << fmt(r.at("baseline_fitness")) << '\n'
              << "best fitness     " << fmt(r.at("best_fitness")) << " (" << fmt(r.at("delta")) << ")\n"
              << "pruned " << r.at("popcount") << " of budget " << r.at("budget") << " after "
              << r.at("evaluations") << " evaluations\n"
              << mask_grid(r.at("best_mask"))
              << "outputs in " << std::filesystem::path(r.at("files").at("trace").get<std::string>()).parent_path().string()
              << '\n';
  } else if (cmd == "inspect") {
    const auto mode = r.at("mode").get<std::string>();
    std::cout << "baseline fitness " << fmt(r.at("baseline_fitness")) << '\n';
    if (mode == "leave-one-out") {
      std::cout << "impact of removing each unit (positive = removal helps):\n";
      std::size_t l = 0;
      for (const auto& row : r.at("impact")) {
        std::cout << "layer " << l++ << ":";
        for (const auto& v : row) std::cout << ' ' << fmt(v);
        std::cout << '\n';
      }
      std::cout << "csv: " << r.at("files").at("csv").get<std::string>() << '\n';
    } else if (mode == "greedy") {
      std::cout << "greedy fitness   " << fmt(r.at("fitness")) << " (" << fmt(r.at("delta")) << ")\n"
                << "pruned " << r.at("popcount") << " units"
                << (r.at("below_baseline").get<bool>() ? ", below the unpruned merge" : "") << '\n'
                << mask_grid(r.at("mask"));
    } else {
      std::cout << "random pruning of " << r.at("popcount") << " units over " << r.at("seeds")
                << " seeds: mean " << fmt(r.at("mean_fitness")) << " std " << fmt(r.at("std_fitness")) << " ("
                << fmt(r.at("delta")) << ")\n";
    }
  } else if (cmd == "eval") {
    std::printf("%-16s %10s %10s %10s\n", "task", "accuracy", "expert", "normalized");
    for (const auto& row : r.at("rows")) {
      std::printf("%-16s %10s %10s %10s\n", row.at("task").get<std::string>().c_str(), fmt(row.at("accuracy")).c_str(),
                  fmt(row.at("expert")).c_str(), fmt(row.at("normalized")).c_str());
    }
    std::printf("mean normalized  %s\n", fmt(r.at("mean_normalized")).c_str());
  } else if (cmd == "testbed-export") {
    std::cout << "testbed with " << r.at("tasks").size() << " tasks written to " << r.at("dir").get<std::string>()
              << '\n';
  }
}

// Opens the session from --config (or built-in defaults) and applies flags.
nm_session* open_session(const Options& o) {
  nm_session* s = nullptr;
  if (o.config.empty()) {
    check(nm_session_open_json("{}", ".", &s));
  } else {
    check(nm_session_open(o.config.c_str(), &s));
  }
  auto set = [&](const char* key, const std::string& value) {
    const nm_status st = nm_session_set(s, key, value.c_str());
    if (st != NM_OK) {
      nm_session_close(s);
      check(st);
    }
  };
  if (!o.output.empty()) set("output_dir", o.output);
  if (o.pop) set("search.pop", std::to_string(*o.pop));
  if (o.gens) set("search.generations", std::to_string(*o.gens));
  if (o.sigma) set("search.sigma0", json(*o.sigma).dump());
  if (o.max_prune) set("search.max_prune", json(*o.max_prune).dump());
  if (o.seed) set("search.seed", std::to_string(*o.seed));
  if (o.parallel) set("search.parallel", std::to_string(*o.parallel));
  if (o.subsample) set("search.subsample", std::to_string(*o.subsample));
  return s;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error (io): cannot open " << path << '\n';
    throw ApiFailure{NM_ERR_IO};
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void log_to_stderr(nm_log_level level, const char* msg, void*) {
  const char* prefix = level == NM_LOG_ERROR ? "error: " : level == NM_LOG_WARN ? "warning: " : "";
  std::cerr << prefix << msg << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Merge LoRA adapters and search for negative modules to prune."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(nm_version()));
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "Run configuration (JSON)");
    sub->add_option("-o,--output", o.output, "Output directory (overrides the config)");
    sub->add_flag("--json", o.json_out, "Print the raw JSON report");
    sub->add_flag("-q,--quiet", o.quiet, "Only print warnings and errors");
  };

  auto* merge = app.add_subcommand("merge", "Merge all adapters, optionally pruning the units in a mask");
  common(merge);
  merge->add_option("--mask", o.mask, "Mask JSON file; omitted means no pruning");

  auto* search = app.add_subcommand("search", "Run the evolutionary search for negative modules");
  common(search);
  search->add_option("--pop", o.pop, "Population size (default 16)");
  search->add_option("--gens", o.gens, "Generations (default 60)");
  search->add_option("--sigma", o.sigma, "Initial step size (default 0.5)");
  search->add_option("--max-prune", o.max_prune, "Fraction of units that may be pruned (default 0.2)");
  search->add_option("--seed", o.seed, "Random seed (default 0)");
  search->add_option("--parallel", o.parallel, "Concurrent evaluators (default 1)");
  search->add_option("--subsample", o.subsample, "Evaluation items per task per fitness call");
  search->add_option("--resume", o.resume, "Continue from a checkpoint file");

  auto* inspect = app.add_subcommand("inspect", "Diagnostics: leave-one-out, greedy or random pruning");
  common(inspect);
  inspect->add_option("--mode", o.mode, "leave-one-out | greedy | random")
      ->check(CLI::IsMember({"leave-one-out", "greedy", "random"}));
  inspect->add_option("--sparsity", o.sparsity, "Fraction pruned in random mode (default 0.167)");
  inspect->add_option("--seeds", o.seeds, "Number of random masks (default 3)");
  inspect->add_option("--seed", o.seed, "First random seed (default 0)");
  inspect->add_option("--parallel", o.parallel, "Concurrent evaluators (default 1)");

  auto* eval = app.add_subcommand("eval", "Evaluate a merged delta file");
  common(eval);
  eval->add_option("--delta", o.delta, "merged.safetensors to evaluate")->required();

  auto* exp = app.add_subcommand("testbed-export", "Write the synthetic testbed to a directory");
  exp->add_option("--spec", o.spec_path, "Testbed spec JSON file (defaults apply when omitted)");
  exp->add_option("--dir", o.export_dir, "Destination directory")->required();
  exp->add_flag("--json", o.json_out, "Print the raw JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  nm_set_log_callback(log_to_stderr, nullptr, o.quiet ? NM_LOG_WARN : NM_LOG_INFO);

  nm_session* session = nullptr;
  try {
    char* raw = nullptr;
    if (exp->parsed()) {
      const std::string spec = o.spec_path.empty() ? std::string() : read_file(o.spec_path);
      check(nm_export_testbed(spec.empty() ? nullptr : spec.c_str(), o.export_dir.c_str(), &raw));
    } else {
      session = open_session(o);
      if (merge->parsed()) {
        check(nm_cmd_merge(session, o.mask.empty() ? nullptr : o.mask.c_str(), &raw));
      } else if (search->parsed()) {
        check(nm_cmd_search(session, o.resume.empty() ? nullptr : o.resume.c_str(), &raw));
      } else if (inspect->parsed()) {
        check(nm_cmd_inspect(session, o.mode.c_str(), o.sparsity, o.seeds, &raw));
      } else if (eval->parsed()) {
        check(nm_cmd_eval(session, o.delta.c_str(), &raw));
      }
    }
    const json report = take_report(raw);
    if (o.json_out) {
      std::cout << report.dump(2) << '\n';
    } else {
      print_report(report);
    }
  } catch (const ApiFailure& f) {
    nm_session_close(session);
    return nm_exit_code(f.status);
  } catch (const std::exception& e) {
    std::cerr << "error (internal): " << e.what() << '\n';
    nm_session_close(session);
    return 1;
  }
  nm_session_close(session);
  return 0;
}
