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

#include "external_eval.hpp"

#include <cmath>

namespace negmerge {

using nlohmann::json;

json make_request(std::uint64_t id, const std::string& merged_path, const std::vector<std::string>& tasks,
                  std::optional<std::size_t> subsample) {
  json j = {{"id", id}, {"merged_path", merged_path}, {"tasks", tasks}};
  if (subsample) j["subsample"] = *subsample;
  return j;
}

TaskAccuracy parse_response(const std::string& line, std::uint64_t expected_id) {
  const json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    fail(ErrorCode::protocol, "malformed JSON from evaluator: " + line.substr(0, 200));
  }
  if (!j.contains("id") || !j["id"].is_number_unsigned()) fail(ErrorCode::protocol, "evaluator response has no id");
  const auto id = j["id"].get<std::uint64_t>();
  if (id != expected_id) {
    fail(ErrorCode::protocol, "evaluator answered id " + std::to_string(id) + " to request " +
                                  std::to_string(expected_id));
  }
  if (j.contains("error") && !j["error"].is_null()) {
    fail(ErrorCode::evaluator, "evaluator reported: " +
                                   (j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump()));
  }
  if (!j.contains("per_task_accuracy") || !j["per_task_accuracy"].is_object()) {
    fail(ErrorCode::protocol, "evaluator response lacks per_task_accuracy");
  }
  TaskAccuracy out;
  for (auto& [task, v] : j["per_task_accuracy"].items()) {
    if (!v.is_number()) fail(ErrorCode::protocol, "accuracy for '" + task + "' is not a number");
    out[task] = v.get<double>();
  }
  return out;
}

ExternalEvaluator::ExternalEvaluator(ExternalEvalConfig cfg, std::size_t slot) : cfg_(std::move(cfg)), slot_(slot) {
  if (cfg_.command.empty()) fail(ErrorCode::config, "evaluator.command must not be empty");
  if (!(cfg_.timeout_s > 0.0)) fail(ErrorCode::config, "evaluator.timeout_s must be positive");
}

ExternalEvaluator::~ExternalEvaluator() = default;

void ExternalEvaluator::ensure_started() {
  if (!child_ || !child_->running()) child_ = std::make_unique<ChildProcess>(cfg_.command);
}

TaskAccuracy ExternalEvaluator::evaluate(const MergedDelta& delta, std::uint64_t /*stream*/) {
  std::error_code ec;
  std::filesystem::create_directories(cfg_.workdir, ec);
  const auto path = std::filesystem::absolute(cfg_.workdir / ("candidate-" + std::to_string(slot_) + ".safetensors"));
  save_delta(path, delta, json{{"candidate_slot", slot_}});
  return evaluate_path(path);
}

TaskAccuracy ExternalEvaluator::evaluate_path(const std::filesystem::path& merged_path) {
  ensure_started();
  const std::uint64_t id = next_id_++;
  child_->write_line(make_request(id, std::filesystem::absolute(merged_path).string(), cfg_.tasks, cfg_.subsample).dump());
  const auto timeout = std::chrono::milliseconds(static_cast<long long>(std::llround(cfg_.timeout_s * 1000.0)));
  const auto line = child_->read_line(timeout);
  if (!line) {
    // The child may still answer later and desynchronize the stream, so it
    // is not reused.
    child_->kill();
    child_.reset();
    fail(ErrorCode::timeout, "evaluator did not answer request " + std::to_string(id) + " within " +
                                 std::to_string(cfg_.timeout_s) + " s");
  }
  return parse_response(*line, id);
}

}  // namespace negmerge
