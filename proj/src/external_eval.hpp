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

// Client side of the evaluator wire protocol: one JSON object per line over
// the child's stdin/stdout.
//
//   request  {"id": u64, "merged_path": str, "tasks": [str], "subsample": int?}
//   response {"id": u64, "per_task_accuracy": {task: float}, "error": str?}

#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fitness.hpp"
#include "subprocess.hpp"

namespace negmerge {

struct ExternalEvalConfig {
  std::vector<std::string> command;
  double timeout_s = 600.0;
  std::vector<std::string> tasks;
  std::optional<std::size_t> subsample;
  std::filesystem::path workdir;  // merged candidates are written here
};

nlohmann::json make_request(std::uint64_t id, const std::string& merged_path, const std::vector<std::string>& tasks,
                            std::optional<std::size_t> subsample);
// Throws protocol for malformed JSON or an id mismatch and evaluator for an
// error reported by the evaluator.
TaskAccuracy parse_response(const std::string& line, std::uint64_t expected_id);

class ExternalEvaluator : public Evaluator {
 public:
  // `slot` keeps the candidate files of concurrent clients apart.
  ExternalEvaluator(ExternalEvalConfig cfg, std::size_t slot);
  ~ExternalEvaluator() override;

  TaskAccuracy evaluate(const MergedDelta& delta, std::uint64_t stream) override;
  // Evaluates a delta file that already exists.
  TaskAccuracy evaluate_path(const std::filesystem::path& merged_path);

 private:
  void ensure_started();

  ExternalEvalConfig cfg_;
  std::size_t slot_;
  std::uint64_t next_id_ = 1;
  std::unique_ptr<ChildProcess> child_;
};

}  // namespace negmerge
