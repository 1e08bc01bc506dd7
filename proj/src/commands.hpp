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

// Top-level commands. Each writes its artifacts under the configured output
// directory and returns a JSON report.

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "config.hpp"

namespace negmerge {

/// Loaded adapters, grid, expert scores and an evaluator pool for one config.
class Workspace {
 public:
  explicit Workspace(RunConfig cfg);
  ~Workspace();
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  const RunConfig& config() const { return cfg_; }
  const ModuleGrid& grid() const { return grid_; }
  const ExpertScores& experts() const { return experts_; }
  const SyntheticTestbed* testbed() const { return bed_ ? &*bed_ : nullptr; }
  EvaluatorPool& pool();
  // Task names missing an expert score.
  std::vector<std::string> missing_experts() const;

 private:
  RunConfig cfg_;
  std::optional<SyntheticTestbed> bed_;
  ModuleGrid grid_;
  ExpertScores experts_;
  std::vector<std::unique_ptr<Evaluator>> evaluators_;
  EvaluatorPool pool_;
};

nlohmann::json cmd_merge(Workspace& ws, const std::optional<std::filesystem::path>& mask_path);

struct SearchOptions {
  std::optional<std::filesystem::path> resume;  // existing checkpoint to continue
};
nlohmann::json cmd_search(Workspace& ws, const SearchOptions& opts = {});

enum class InspectMode { leave_one_out, greedy, random };
struct InspectOptions {
  InspectMode mode = InspectMode::leave_one_out;
  double sparsity = 0.167;
  std::size_t seeds = 3;
};
nlohmann::json cmd_inspect(Workspace& ws, const InspectOptions& opts);

nlohmann::json cmd_eval(Workspace& ws, const std::filesystem::path& delta_path);

nlohmann::json cmd_export_testbed(const TestbedSpec& spec, const std::filesystem::path& dir);

// "pop=16 gens=60 sigma=0.5 k=0.2"
std::string search_header(const SearchConfig& cfg);

}  // namespace negmerge
