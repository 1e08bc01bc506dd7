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

// Run configuration. One JSON document, validated up front; unknown keys are
// errors. Relative paths resolve against the config file's directory.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adapter_store.hpp"
#include "merge_engine.hpp"
#include "search.hpp"
#include "testbed.hpp"

namespace negmerge {

struct AdapterEntry {
  std::string task;
  std::filesystem::path path;
  std::optional<double> expert_accuracy;
};

struct EvaluatorConfig {
  enum class Kind { builtin, external };
  Kind kind = Kind::builtin;
  std::optional<TestbedSpec> testbed;          // builtin: generate
  std::optional<std::filesystem::path> testbed_dir;  // builtin: load an export
  std::vector<std::string> command;            // external
  double timeout_s = 600.0;
};

struct RunConfig {
  std::vector<AdapterEntry> adapters;
  nlohmann::json naming = {{"preset", "canonical"}};
  MergeParams merge = MergeParams::nlp_defaults(MergeMethod::ta);
  SearchConfig search;
  std::size_t parallel = 1;
  std::optional<std::size_t> subsample;
  EvaluatorConfig evaluator;
  std::filesystem::path output_dir = "out";

  void validate() const;
  nlohmann::json to_json() const;
};

RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

}  // namespace negmerge
