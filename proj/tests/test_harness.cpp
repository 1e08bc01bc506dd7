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

// Evaluator wire protocol, child processes, run configuration and the
// command layer.

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "external_eval.hpp"
#include "subprocess.hpp"
#include "test_util.hpp"

using namespace negmerge;
using namespace negmerge::testing;
using nlohmann::json;

namespace {

ExternalEvalConfig fake(std::vector<std::string> args, const std::filesystem::path& workdir, double timeout = 10.0) {
  ExternalEvalConfig c;
  c.command = {FAKE_EVALUATOR};
  c.command.insert(c.command.end(), args.begin(), args.end());
  c.timeout_s = timeout;
  c.tasks = {"task0", "task1", "task2"};
  c.workdir = workdir;
  return c;
}

MergedDelta tiny_delta() {
  MergedDelta d;
  d.layers.resize(1);
  for (auto& m : d.layers[0]) m = Matrix::Zero(2, 2);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("protocol") {
  TEST_CASE("request shape") {
    const auto j = make_request(7, "/tmp/m.safetensors", {"a", "b"}, 64);
    CHECK(j.at("id") == 7);
    CHECK(j.at("merged_path") == "/tmp/m.safetensors");
    CHECK(j.at("tasks") == json{"a", "b"});
    CHECK(j.at("subsample") == 64);
    CHECK(!make_request(1, "x", {}, std::nullopt).contains("subsample"));
  }

  TEST_CASE("response parsing surfaces each failure distinctly") {
    CHECK(parse_response(R"({"id":3,"per_task_accuracy":{"a":0.5}})", 3) == TaskAccuracy{{"a", 0.5}});
    CHECK(parse_response(R"({"id":3,"per_task_accuracy":{"a":0.5},"error":null})", 3).size() == 1);
    CHECK(error_code_of([] { parse_response("nope", 1); }) == ErrorCode::protocol);
    CHECK(error_code_of([] { parse_response(R"({"per_task_accuracy":{}})", 1); }) == ErrorCode::protocol);
    CHECK(error_code_of([] { parse_response(R"({"id":2,"per_task_accuracy":{}})", 1); }) == ErrorCode::protocol);
    CHECK(error_code_of([] { parse_response(R"({"id":1,"error":"oom"})", 1); }) == ErrorCode::evaluator);
    CHECK(error_code_of([] { parse_response(R"({"id":1})", 1); }) == ErrorCode::protocol);
    CHECK(error_code_of([] { parse_response(R"({"id":1,"per_task_accuracy":{"a":"x"}})", 1); }) ==
          ErrorCode::protocol);
  }

  TEST_CASE("child process line I/O") {
    ChildProcess c({FAKE_EVALUATOR, "echo", "0.25"});
    c.write_line(make_request(1, "x", {"t"}, std::nullopt).dump());
    const auto line = c.read_line(std::chrono::milliseconds(5000));
    REQUIRE(line);
    CHECK(parse_response(*line, 1) == TaskAccuracy{{"t", 0.25}});
    CHECK(c.close() == 0);
    CHECK(error_code_of([] { ChildProcess({"/definitely/not/here"}); }) == ErrorCode::config);
  }

  TEST_CASE("echo evaluator feeds fitness") {
    TempDir dir;
    ExternalEvaluator ev(fake({"echo", "0.5"}, dir.path()), 0);
    const auto acc = ev.evaluate(tiny_delta(), 0);
    CHECK(acc.at("task1") == 0.5);
    ExpertScores e;
    e.accuracy = {{"task0", 0.8}, {"task1", 0.8}, {"task2", 0.8}};
    CHECK(fitness(acc, e) == doctest::Approx(0.5 / 0.8));
    CHECK(std::filesystem::exists(dir / "candidate-0.safetensors"));
  }

  TEST_CASE("misbehaving evaluators") {
    TempDir dir;
    ExternalEvaluator bad_id(fake({"bad-id"}, dir.path()), 0);
    CHECK(error_code_of([&] { bad_id.evaluate(tiny_delta(), 0); }) == ErrorCode::protocol);
    ExternalEvaluator malformed(fake({"malformed"}, dir.path()), 1);
    CHECK(error_code_of([&] { malformed.evaluate(tiny_delta(), 0); }) == ErrorCode::protocol);
    ExternalEvaluator reported(fake({"error"}, dir.path()), 2);
    CHECK(error_code_of([&] { reported.evaluate(tiny_delta(), 0); }) == ErrorCode::evaluator);
    // The same client keeps working after a reported error.
    CHECK(error_code_of([&] { reported.evaluate(tiny_delta(), 0); }) == ErrorCode::evaluator);
    ExternalEvaluator quits(fake({"exit"}, dir.path()), 3);
    CHECK(error_code_of([&] { quits.evaluate(tiny_delta(), 0); }) == ErrorCode::protocol);

    const auto t0 = std::chrono::steady_clock::now();
    ExternalEvaluator slow(fake({"sleep", "30"}, dir.path(), 0.3), 4);
    CHECK(error_code_of([&] { slow.evaluate(tiny_delta(), 0); }) == ErrorCode::timeout);
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(10));
    CHECK(error_code_of([] { ExternalEvaluator(ExternalEvalConfig{}, 0); }) == ErrorCode::config);
  }

  TEST_CASE("requests are one per line with increasing ids") {
    TempDir dir;
    const auto log = dir / "requests.log";
    ::setenv("FAKE_EVAL_LOG", log.c_str(), 1);
    {
      ExternalEvaluator ev(fake({"echo", "0.9"}, dir.path()), 0);
      for (int i = 0; i < 3; ++i) ev.evaluate(tiny_delta(), 0);
    }
    ::unsetenv("FAKE_EVAL_LOG");
    std::ifstream in(log);
    std::string line;
    std::uint64_t expect = 1;
    while (std::getline(in, line)) {
      const auto j = json::parse(line);
      CHECK(j.at("id") == expect++);
      CHECK(std::filesystem::path(j.at("merged_path").get<std::string>()).is_absolute());
    }
    CHECK(expect == 4);
  }

  TEST_CASE("external evaluation of an exported testbed matches the builtin one") {
    TempDir dir;
    TestbedSpec spec;
    const auto bed = make_testbed(spec);
    export_testbed(bed, dir / "bed");
    const auto grid = ModuleGrid::build(bed.adapters);
    ExternalEvaluator ev(fake({"--testbed", (dir / "bed").string()}, dir / "work"), 0);
    std::mt19937_64 gen(1);
    for (int i = 0; i < 5; ++i) {
      FlatMask f(9);
      for (auto& x : f) x = gen() & 1;
      const auto d = merge_with_mask(grid, reshape_mask(f, 3, 3), MergeParams::nlp_defaults(MergeMethod::ties));
      const auto ext = ev.evaluate(d, 0);
      const auto ref = eval_builtin(d, bed);
      for (const auto& [task, acc] : ref) CHECK(std::abs(ext.at(task) - acc) <= 1e-6);
    }
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults and the default testbed") {
    const auto cfg = parse_config(json::object());
    CHECK(cfg.merge.method == MergeMethod::ta);
    CHECK(cfg.merge.lambda == 0.3);
    CHECK(cfg.search.pop == 16);
    CHECK(cfg.search.generations == 60);
    CHECK(cfg.search.sigma0 == 0.5);
    CHECK(cfg.search.max_prune == 0.2);
    CHECK(cfg.search.seed == 0);
    CHECK(cfg.parallel == 1);
    CHECK(cfg.evaluator.testbed.has_value());
    CHECK(search_header(cfg.search) == "pop=16 gens=60 sigma=0.5 k=0.2");
    CHECK(parse_config({{"evaluator", {{"type", "builtin"}}}}).evaluator.testbed.has_value());
  }

  TEST_CASE("method defaults fill unspecified fields") {
    const auto ties = parse_config({{"merge", {{"method", "ties"}}}});
    CHECK(ties.merge.lambda == 1.2);
    CHECK(ties.merge.density == 0.8);
    const auto custom = parse_config({{"merge", {{"method", "ties"}, {"lambda", 0.9}}}});
    CHECK(custom.merge.lambda == 0.9);
    CHECK(custom.merge.density == 0.8);
    CHECK(parse_config({{"merge", {{"method", "sum"}}}}).merge.method == MergeMethod::ta);
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    CHECK(error_code_of([] { parse_config({{"colour", 1}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"search", {{"popsize", 4}}}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"merge", {{"method", "magic"}}}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"search", {{"pop", "many"}}}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"search", {{"max_prune", 1.0}}}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"search", {{"parallel", 0}}}}); }) == ErrorCode::config);
    CHECK(error_code_of([] { parse_config({{"evaluator", {{"type", "external"}, {"command", json::array()}}}}); }) ==
          ErrorCode::config);
    CHECK(error_code_of([] {
            parse_config({{"adapters", {{{"task", "a"}, {"path", "x"}}, {{"task", "a"}, {"path", "y"}}}}});
          }) == ErrorCode::config);
  }

  TEST_CASE("relative paths resolve against the config directory") {
    TempDir dir;
    {
      std::ofstream out(dir / "run.json");
      out << R"({
        // comments are allowed
        "adapters": [{"task": "a", "path": "ad/a.safetensors", "expert_accuracy": 0.9}],
        "evaluator": {"type": "external", "command": ["python3", "bridge.py"], "timeout_s": 30},
        "output_dir": "results"
      })";
    }
    const auto cfg = load_config(dir / "run.json");
    CHECK(cfg.adapters.at(0).path == dir / "ad/a.safetensors");
    CHECK(cfg.output_dir == dir / "results");
    CHECK(cfg.evaluator.kind == EvaluatorConfig::Kind::external);
    CHECK(cfg.evaluator.timeout_s == 30.0);
    CHECK(*cfg.adapters.at(0).expert_accuracy == 0.9);
    CHECK(error_code_of([&] { load_config(dir / "missing.json"); }) == ErrorCode::io);
  }

  TEST_CASE("serialized config parses back") {
    const auto a = parse_config({{"merge", {{"method", "knots"}}}, {"search", {{"seed", 5}, {"subsample", 64}}}});
    const auto b = parse_config(a.to_json());
    CHECK(b.to_json() == a.to_json());
  }
}

TEST_SUITE("commands") {
  TEST_CASE("merge, search, inspect and eval on the builtin testbed") {
    TempDir dir;
    auto cfg = parse_config({{"search", {{"generations", 8}}}});
    cfg.output_dir = dir / "out";
    Workspace ws(cfg);

    const auto m = cmd_merge(ws, std::nullopt);
    CHECK(m.at("popcount") == 0);
    const auto loaded = load_delta(dir / "out/merged.safetensors");
    CHECK(loaded.manifest.at("merge").at("method") == "ta");
    CHECK(json::parse(slurp(dir / "out/merge.json")) == loaded.manifest);

    const auto s = cmd_search(ws);
    CHECK(s.at("header") == "pop=16 gens=8 sigma=0.5 k=0.2");
    const auto trace = slurp(dir / "out/trace.csv");
    CHECK(trace.rfind("generation,best_val_fitness,best_ever_fitness,popcount\n", 0) == 0);
    CHECK(count_lines(trace) == 9);
    CHECK(count_lines(slurp(dir / "out/timing.csv")) == 9);
    CHECK(std::filesystem::exists(dir / "out/best_mask.json"));
    CHECK(std::filesystem::exists(dir / "out/checkpoint.json"));
    CHECK(s.at("best_fitness").get<double>() >= s.at("baseline_fitness").get<double>());
    CHECK(read_mask(dir / "out/best_mask.json").popcount() == s.at("popcount"));

    const auto again = cmd_merge(ws, dir / "out/best_mask.json");
    CHECK(again.at("popcount") == s.at("popcount"));
    const auto e = cmd_eval(ws, dir / "out/merged.safetensors");
    CHECK(e.at("mean_normalized").get<double>() == doctest::Approx(s.at("best_fitness").get<double>()));

    const auto loo = cmd_inspect(ws, {InspectMode::leave_one_out, 0.167, 3});
    CHECK(count_lines(slurp(dir / "out/leave_one_out.csv")) == 1 + 9);
    CHECK(loo.at("impact").size() == 3);

    const auto rnd = cmd_inspect(ws, {InspectMode::random, 0.167, 3});
    CHECK(rnd.contains("mean_fitness"));
    CHECK(rnd.contains("std_fitness"));
    CHECK(rnd.at("popcount") == 2);
    CHECK(count_lines(slurp(dir / "out/random_prune.csv")) == 4);

    const auto greedy = cmd_inspect(ws, {InspectMode::greedy, 0.167, 3});
    CHECK(greedy.contains("below_baseline"));
  }

  TEST_CASE("mask dimension mismatch is a shape error") {
    TempDir dir;
    auto cfg = parse_config(json::object());
    cfg.output_dir = dir / "out";
    Workspace ws(cfg);
    write_mask(dir / "m.json", PruningMask::zeros(2, 3), {"a", "b", "c"});
    try {
      cmd_merge(ws, dir / "m.json");
      FAIL("expected a shape error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::shape);
      CHECK(std::string(e.what()).find("2x3") != std::string::npos);
    }
  }

  TEST_CASE("zero budget search keeps everything") {
    TempDir dir;
    auto cfg = parse_config({{"search", {{"generations", 4}, {"max_prune", 0.0}}}});
    cfg.output_dir = dir / "out";
    Workspace ws(cfg);
    CHECK(cmd_search(ws).at("popcount") == 0);
  }

  TEST_CASE("search through the external evaluator") {
    TempDir dir;
    const auto bed = make_testbed(TestbedSpec{});
    export_testbed(bed, dir / "bed");
    json adapters = json::array();
    for (const auto& t : bed.tasks) {
      adapters.push_back({{"task", t},
                          {"path", (dir / "bed/adapters" / t / "adapter.safetensors").string()},
                          {"expert_accuracy", bed.experts.accuracy.at(t)}});
    }
    auto cfg = parse_config({{"adapters", adapters},
                             {"evaluator",
                              {{"type", "external"},
                               {"command", {FAKE_EVALUATOR, "--testbed", (dir / "bed").string()}}}},
                             {"search", {{"generations", 6}, {"parallel", 3}}},
                             {"output_dir", (dir / "ext").string()}});
    Workspace ext(cfg);
    const auto a = cmd_search(ext);

    auto ref_cfg = parse_config({{"evaluator", {{"type", "builtin"}, {"testbed_dir", (dir / "bed").string()}}},
                                 {"search", {{"generations", 6}}},
                                 {"output_dir", (dir / "ref").string()}});
    Workspace ref(ref_cfg);
    const auto b = cmd_search(ref);
    CHECK(slurp(dir / "ext/trace.csv") == slurp(dir / "ref/trace.csv"));
    CHECK(a.at("best_mask") == b.at("best_mask"));
  }

  TEST_CASE("eval without expert scores reports absolute accuracy") {
    TempDir dir;
    const auto bed = make_testbed(TestbedSpec{});
    export_testbed(bed, dir / "bed");
    json adapters = json::array();
    for (const auto& t : bed.tasks) {
      adapters.push_back({{"task", "renamed_" + t}, {"path", (dir / "bed/adapters" / t / "adapter.safetensors").string()}});
    }
    auto cfg = parse_config({{"adapters", adapters},
                             {"evaluator", {{"type", "builtin"}, {"testbed_dir", (dir / "bed").string()}}},
                             {"output_dir", (dir / "out").string()}});
    Workspace ws(cfg);
    cmd_merge(ws, std::nullopt);
    std::vector<std::string> warnings;
    set_log_sink([&](LogLevel level, std::string_view msg) {
      if (level == LogLevel::warn) warnings.emplace_back(msg);
    });
    const auto r = cmd_eval(ws, dir / "out/merged.safetensors");
    set_log_sink(default_log_sink());
    CHECK(r.at("mean_normalized").is_null());
    for (const auto& row : r.at("rows")) {
      CHECK(row.at("normalized").is_null());
      CHECK(row.at("accuracy").is_number());
    }
    CHECK(warnings.size() == 3);
    CHECK(error_code_of([&] { cmd_search(ws); }) == ErrorCode::config);
  }

  TEST_CASE("testbed export command") {
    TempDir dir;
    const auto r = cmd_export_testbed(TestbedSpec{}, dir / "bed");
    CHECK(r.at("planted_negatives").size() == 3);
    const auto meta = json::parse(slurp(dir / "bed/testbed.json"));
    CHECK(meta.at("format") == "negmerge-testbed");
  }
}
