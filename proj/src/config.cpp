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

#include "config.hpp"

#include <fstream>
#include <set>

namespace negmerge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) fail(ErrorCode::config, where + " must be an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (auto& [k, v] : j.items()) {
    if (!known.count(k)) fail(ErrorCode::config, "unknown key " + (where.empty() ? k : where + "." + k));
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

MergeMethod method_from(const json& v, const std::string& where) {
  const auto name = v.get<std::string>();
  const auto m = parse_method(name == "sum" ? "ta" : name);
  if (!m) fail(ErrorCode::config, where + ": unknown merge method '" + name + "'");
  return *m;
}

MergeParams parse_merge(const json& j) {
  only_keys(j, "merge", {"method", "lambda", "density", "drop_rate", "inner_method", "seed", "dare_aggregation", "order"});
  MergeParams p = MergeParams::nlp_defaults(j.contains("method") ? method_from(j["method"], "merge.method") : MergeMethod::ta);
  if (j.contains("lambda")) p.lambda = j["lambda"].get<double>();
  if (j.contains("density")) p.density = j["density"].get<double>();
  if (j.contains("drop_rate")) p.drop_rate = j["drop_rate"].get<double>();
  if (j.contains("inner_method")) p.inner_method = method_from(j["inner_method"], "merge.inner_method");
  if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("dare_aggregation")) {
    const auto agg = j["dare_aggregation"].get<std::string>();
    if (agg != "ties" && agg != "sum") fail(ErrorCode::config, "merge.dare_aggregation must be ties or sum");
    p.dare_sum = agg == "sum";
  }
  if (j.contains("order")) {
    const auto o = parse_order(j["order"].get<std::string>());
    if (!o) fail(ErrorCode::config, "merge.order must be prune_then_align or align_then_prune");
    p.order = *o;
  }
  return p;
}

}  // namespace

void RunConfig::validate() const {
  merge.validate();
  search.validate();
  if (parallel < 1) fail(ErrorCode::config, "search.parallel must be at least 1");
  if (subsample && *subsample < 1) fail(ErrorCode::config, "search.subsample must be positive");
  std::set<std::string> seen;
  for (const auto& a : adapters) {
    if (a.task.empty()) fail(ErrorCode::config, "adapter task names must be non-empty");
    if (!seen.insert(a.task).second) fail(ErrorCode::config, "duplicate adapter task '" + a.task + "'");
    if (a.expert_accuracy && !(*a.expert_accuracy > 0.0 && *a.expert_accuracy <= 1.0)) {
      fail(ErrorCode::config, "expert_accuracy for '" + a.task + "' must lie in (0, 1]");
    }
  }
  if (evaluator.kind == EvaluatorConfig::Kind::external) {
    if (evaluator.command.empty()) fail(ErrorCode::config, "evaluator.command must list the program and its arguments");
    if (!(evaluator.timeout_s > 0.0)) fail(ErrorCode::config, "evaluator.timeout_s must be positive");
    if (adapters.empty()) fail(ErrorCode::config, "an external evaluator needs an explicit adapters list");
  } else {
    if (evaluator.testbed.has_value() == evaluator.testbed_dir.has_value()) {
      fail(ErrorCode::config, "a builtin evaluator needs exactly one of evaluator.testbed or evaluator.testbed_dir");
    }
    if (evaluator.testbed) evaluator.testbed->validate();
  }
}

json RunConfig::to_json() const {
  json ads = json::array();
  for (const auto& a : adapters) {
    json e = {{"task", a.task}, {"path", a.path.string()}};
    if (a.expert_accuracy) e["expert_accuracy"] = *a.expert_accuracy;
    ads.push_back(e);
  }
  json s = search.to_json();
  s["parallel"] = parallel;
  if (subsample) s["subsample"] = *subsample;
  json ev;
  if (evaluator.kind == EvaluatorConfig::Kind::external) {
    ev = {{"type", "external"}, {"command", evaluator.command}, {"timeout_s", evaluator.timeout_s}};
  } else if (evaluator.testbed) {
    ev = {{"type", "builtin"}, {"testbed", evaluator.testbed->to_json()}};
  } else {
    ev = {{"type", "builtin"}, {"testbed_dir", evaluator.testbed_dir->string()}};
  }
  return {{"adapters", ads}, {"naming", naming}, {"merge", merge.to_json()}, {"search", s},
          {"evaluator", ev}, {"output_dir", output_dir.string()}};
}

RunConfig parse_config(const json& j, const fs::path& base_dir) {
  only_keys(j, "", {"adapters", "naming", "merge", "search", "evaluator", "output_dir"});
  RunConfig cfg;
  try {
    if (j.contains("adapters")) {
      for (const auto& a : j["adapters"]) {
        only_keys(a, "adapters[]", {"task", "path", "expert_accuracy"});
        AdapterEntry e;
        e.task = a.at("task").get<std::string>();
        e.path = resolve(base_dir, a.at("path").get<std::string>());
        if (a.contains("expert_accuracy")) e.expert_accuracy = a["expert_accuracy"].get<double>();
        cfg.adapters.push_back(std::move(e));
      }
    }
    if (j.contains("naming")) {
      NamingScheme::from_json(j["naming"]);  // validate now
      cfg.naming = j["naming"];
    }
    if (j.contains("merge")) cfg.merge = parse_merge(j["merge"]);
    if (j.contains("search")) {
      const auto& s = j["search"];
      only_keys(s, "search", {"pop", "generations", "sigma0", "max_prune", "mu0", "seed", "parallel", "subsample"});
      cfg.search.pop = s.value("pop", cfg.search.pop);
      cfg.search.generations = s.value("generations", cfg.search.generations);
      cfg.search.sigma0 = s.value("sigma0", cfg.search.sigma0);
      cfg.search.max_prune = s.value("max_prune", cfg.search.max_prune);
      cfg.search.mu0 = s.value("mu0", cfg.search.mu0);
      cfg.search.seed = s.value("seed", cfg.search.seed);
      cfg.parallel = s.value("parallel", cfg.parallel);
      if (s.contains("subsample") && !s["subsample"].is_null()) cfg.subsample = s["subsample"].get<std::size_t>();
    }
    if (j.contains("evaluator")) {
      const auto& e = j["evaluator"];
      const auto type = e.value("type", std::string("builtin"));
      if (type == "builtin") {
        only_keys(e, "evaluator", {"type", "testbed", "testbed_dir"});
        if (e.contains("testbed")) cfg.evaluator.testbed = TestbedSpec::from_json(e["testbed"]);
        if (e.contains("testbed_dir")) cfg.evaluator.testbed_dir = resolve(base_dir, e["testbed_dir"].get<std::string>());
        if (!e.contains("testbed") && !e.contains("testbed_dir")) cfg.evaluator.testbed = TestbedSpec{};
      } else if (type == "external") {
        only_keys(e, "evaluator", {"type", "command", "timeout_s"});
        cfg.evaluator.kind = EvaluatorConfig::Kind::external;
        cfg.evaluator.command = e.at("command").get<std::vector<std::string>>();
        cfg.evaluator.timeout_s = e.value("timeout_s", cfg.evaluator.timeout_s);
      } else {
        fail(ErrorCode::config, "evaluator.type must be builtin or external");
      }
    } else {
      cfg.evaluator.testbed = TestbedSpec{};
    }
    if (j.contains("output_dir")) cfg.output_dir = resolve(base_dir, j["output_dir"].get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::config, std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open config " + path.string());
  const json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) fail(ErrorCode::config, path.string() + ": malformed JSON");
  return parse_config(j, path.parent_path());
}

}  // namespace negmerge
