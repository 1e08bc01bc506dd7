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

// Public C API and the command-line tool. Links only the shared library.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "negmerge/negmerge.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Scratch {
 public:
  Scratch() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("negmerge-api-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path operator/(const std::string& s) const { return path_ / s; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

struct RunResult {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(NEGMERGE_CLI) + " " + args + " 2>&1";
  RunResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json take(char* s) {
  REQUIRE(s != nullptr);
  json j = json::parse(s);
  nm_string_free(s);
  return j;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_SUITE("c_api") {
  TEST_CASE("status names and exit codes") {
    CHECK(std::string(nm_status_name(NM_OK)) == "ok");
    CHECK(std::string(nm_status_name(NM_ERR_PROTOCOL)) == "protocol");
    CHECK(nm_exit_code(NM_OK) == 0);
    CHECK(nm_exit_code(NM_ERR_CONFIG) == 2);
    CHECK(nm_exit_code(NM_ERR_SHAPE) == 2);
    CHECK(nm_exit_code(NM_ERR_IO) == 2);
    CHECK(nm_exit_code(NM_ERR_INTERNAL) == 1);
    CHECK(nm_exit_code(NM_ERR_EVALUATOR) == 1);
    CHECK(std::string(nm_version()).size() > 0);
  }

  TEST_CASE("null arguments and bad configs") {
    nm_session* s = nullptr;
    CHECK(nm_session_open(nullptr, &s) == NM_ERR_INVALID_ARGUMENT);
    CHECK(std::string(nm_last_error()).size() > 0);
    CHECK(nm_session_open("/no/such/config.json", &s) == NM_ERR_IO);
    CHECK(s == nullptr);
    CHECK(nm_session_open_json("{oops", nullptr, &s) == NM_ERR_CONFIG);
    CHECK(nm_session_open_json(R"({"bogus": 1})", nullptr, &s) == NM_ERR_CONFIG);
    CHECK(std::string(nm_last_error()).find("bogus") != std::string::npos);
    REQUIRE(nm_session_open_json("{}", nullptr, &s) == NM_OK);
    CHECK(std::string(nm_last_error()).empty());
    CHECK(nm_session_set(s, "search.pop", "lots") == NM_ERR_CONFIG);
    CHECK(nm_session_set(s, "search.sigma0", "-1") == NM_ERR_CONFIG);
    CHECK(nm_session_set(s, "search.colour", "1") == NM_ERR_CONFIG);
    CHECK(nm_session_set(s, "search.pop", "8") == NM_OK);
    char* cfg = nullptr;
    REQUIRE(nm_session_config(s, &cfg) == NM_OK);
    CHECK(take(cfg).at("search").at("pop") == 8);
    nm_session_close(s);
    nm_session_close(nullptr);
  }

  TEST_CASE("map_latent and normalized accuracy") {
    const double z[5] = {0.3, -0.5, 0.7, 0.1, -2.0};
    uint8_t m[5];
    REQUIRE(nm_map_latent(z, 5, 0.4, m) == NM_OK);
    CHECK(std::vector<uint8_t>(m, m + 5) == std::vector<uint8_t>{1, 0, 1, 0, 0});
    CHECK(nm_map_latent(z, 5, 1.5, m) == NM_ERR_INVALID_ARGUMENT);
    double v = 0;
    REQUIRE(nm_normalized_accuracy(0.8657, 0.9250, &v) == NM_OK);
    CHECK(100 * v == doctest::Approx(93.59).epsilon(1e-4));
    CHECK(nm_normalized_accuracy(0.5, 0.0, &v) != NM_OK);
  }

  TEST_CASE("session commands and log callback") {
    Scratch dir;
    std::vector<std::string> lines;
    nm_set_log_callback(
        [](nm_log_level, const char* msg, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(msg); },
        &lines, NM_LOG_INFO);
    nm_session* s = nullptr;
    REQUIRE(nm_session_open_json(R"({"search": {"generations": 5}})", nullptr, &s) == NM_OK);
    REQUIRE(nm_session_set(s, "output_dir", (dir / "out").c_str()) == NM_OK);
    char* report = nullptr;
    REQUIRE(nm_cmd_search(s, nullptr, &report) == NM_OK);
    const auto r = take(report);
    CHECK(r.at("header") == "pop=16 gens=5 sigma=0.5 k=0.2");
    CHECK(!lines.empty());
    CHECK(lines.front() == "pop=16 gens=5 sigma=0.5 k=0.2");
    // Options are frozen once the workspace is loaded.
    CHECK(nm_session_set(s, "search.pop", "8") == NM_ERR_INVALID_ARGUMENT);
    REQUIRE(nm_cmd_eval(s, (dir / "out/merged.safetensors").c_str(), &report) == NM_OK);
    CHECK(take(report).at("rows").size() == 3);
    CHECK(nm_cmd_inspect(s, "sideways", 0.1, 1, &report) == NM_ERR_CONFIG);
    REQUIRE(nm_cmd_inspect(s, "leave-one-out", 0.1, 1, &report) == NM_OK);
    CHECK(take(report).at("impact").size() == 3);
    CHECK(nm_cmd_merge(s, (dir / "missing.json").c_str(), &report) == NM_ERR_IO);
    nm_session_close(s);
    nm_set_log_callback(nullptr, nullptr, NM_LOG_WARN);
  }

  TEST_CASE("adapter inspection") {
    Scratch dir;
    char* report = nullptr;
    REQUIRE(nm_export_testbed(R"({"seed": 4})", dir.path().c_str(), &report) == NM_OK);
    const auto r = take(report);
    CHECK(r.at("tasks").size() == 3);
    nm_adapter* a = nullptr;
    REQUIRE(nm_adapter_load((dir / "adapters/task1/adapter.safetensors").c_str(), nullptr, &a) == NM_OK);
    char* info = nullptr;
    REQUIRE(nm_adapter_info(a, &info) == NM_OK);
    const auto j = take(info);
    CHECK(j.at("task_name") == "task1");
    CHECK(j.at("num_layers") == 3);
    nm_adapter_free(a);
    CHECK(nm_adapter_load((dir / "nothing.safetensors").c_str(), nullptr, &a) == NM_ERR_IO);
    CHECK(nm_adapter_load((dir / "eval.safetensors").c_str(), nullptr, &a) == NM_ERR_SCHEMA);
    CHECK(nm_export_testbed(R"({"seed": "x"})", dir.path().c_str(), &report) == NM_ERR_CONFIG);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2") {
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
    CHECK(run_cli("search --pop").code == 2);
    CHECK(run_cli("inspect --mode sideways").code == 2);
    CHECK(run_cli("--help").code == 0);
  }

  TEST_CASE("search prints the header and is reproducible") {
    Scratch dir;
    const auto a = run_cli("search --gens 6 -o " + quote(dir / "a"));
    CHECK(a.code == 0);
    CHECK(a.out.find("pop=16 gens=6 sigma=0.5 k=0.2") != std::string::npos);
    const auto b = run_cli("search --gens 6 --parallel 3 -o " + quote(dir / "b"));
    CHECK(b.code == 0);
    CHECK(slurp(dir / "a/trace.csv") == slurp(dir / "b/trace.csv"));
    CHECK(slurp(dir / "a/merged.safetensors") == slurp(dir / "b/merged.safetensors"));
    CHECK(slurp(dir / "a/trace.csv").size() > 0);
  }

  TEST_CASE("zero budget and resume") {
    Scratch dir;
    const auto z = run_cli("search --gens 4 --max-prune 0 --json -q -o " + quote(dir / "z"));
    REQUIRE(z.code == 0);
    CHECK(json::parse(z.out).at("popcount") == 0);

    const auto full = run_cli("search --gens 8 --seed 3 -q -o " + quote(dir / "full"));
    REQUIRE(full.code == 0);
    REQUIRE(run_cli("search --gens 4 --seed 3 -q -o " + quote(dir / "part")).code == 0);
    const auto resumed =
        run_cli("search --gens 8 --seed 3 -q -o " + quote(dir / "part") + " --resume " + quote(dir / "part/checkpoint.json"));
    CHECK(resumed.code == 0);
    CHECK(slurp(dir / "full/trace.csv") == slurp(dir / "part/trace.csv"));
    const auto wrong = run_cli("search --gens 8 --seed 4 -q -o " + quote(dir / "part") + " --resume " +
                               quote(dir / "part/checkpoint.json"));
    CHECK(wrong.code == 2);
  }

  TEST_CASE("merge with a mask of the wrong size exits 2") {
    Scratch dir;
    {
      std::ofstream out(dir / "mask.json");
      out << R"({"L": 2, "T": 3, "tasks": ["a", "b", "c"], "rows": ["010", "000"]})";
    }
    const auto r = run_cli("merge --mask " + quote(dir / "mask.json") + " -o " + quote(dir / "out"));
    CHECK(r.code == 2);
    CHECK(r.out.find("2x3") != std::string::npos);
    CHECK(run_cli("merge -o " + quote(dir / "out")).code == 0);
    CHECK(fs::exists(dir / "out/merged.safetensors"));
  }

  TEST_CASE("inspect and eval reports") {
    Scratch dir;
    const auto loo = run_cli("inspect --mode leave-one-out -o " + quote(dir / "o"));
    CHECK(loo.code == 0);
    const auto csv = slurp(dir / "o/leave_one_out.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
    const auto rnd = run_cli("inspect --mode random --sparsity 0.167 --seeds 3 --json -q -o " + quote(dir / "o"));
    REQUIRE(rnd.code == 0);
    const auto j = json::parse(rnd.out);
    CHECK(j.at("mean_fitness").is_number());
    CHECK(j.at("std_fitness").is_number());
    REQUIRE(run_cli("merge -q -o " + quote(dir / "o")).code == 0);
    const auto ev = run_cli("eval --delta " + quote(dir / "o/merged.safetensors") + " -o " + quote(dir / "o"));
    CHECK(ev.code == 0);
    CHECK(ev.out.find("mean normalized") != std::string::npos);
    CHECK(run_cli("eval --delta " + quote(dir / "nope.safetensors")).code == 2);
  }

  TEST_CASE("config file with flag overrides") {
    Scratch dir;
    REQUIRE(run_cli("testbed-export --dir " + quote(dir / "bed")).code == 0);
    {
      std::ofstream out(dir / "run.json");
      out << R"({"merge": {"method": "ties"}, "search": {"generations": 50, "seed": 2},
                "evaluator": {"type": "builtin", "testbed_dir": "bed"}, "output_dir": "cfg-out"})";
    }
    const auto r = run_cli("search --config " + quote(dir / "run.json") + " --gens 3 --json -q");
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out).at("header") == "pop=16 gens=3 sigma=0.5 k=0.2");
    CHECK(fs::exists(dir / "cfg-out/trace.csv"));
    const auto manifest = json::parse(slurp(dir / "cfg-out/merge.json"));
    CHECK(manifest.at("merge").at("method") == "ties");
    CHECK(manifest.at("merge").at("lambda") == 1.2);
    {
      std::ofstream out(dir / "bad.json");
      out << R"({"merge": {"method": "ties", "lamda": 1.0}})";
    }
    CHECK(run_cli("merge --config " + quote(dir / "bad.json")).code == 2);
  }

  TEST_CASE("external evaluator failures surface with exit 1") {
    Scratch dir;
    REQUIRE(run_cli("testbed-export --dir " + quote(dir / "bed")).code == 0);
    {
      std::ofstream out(dir / "run.json");
      out << R"({"adapters": [
                  {"task": "task0", "path": "bed/adapters/task0/adapter.safetensors", "expert_accuracy": 1.0},
                  {"task": "task1", "path": "bed/adapters/task1/adapter.safetensors", "expert_accuracy": 1.0}],
                "evaluator": {"type": "external", "command": [")"
          << FAKE_EVALUATOR << R"(", "bad-id"]}, "search": {"generations": 2}})";
    }
    const auto r = run_cli("search -q --config " + quote(dir / "run.json") + " -o " + quote(dir / "x"));
    CHECK(r.code == 1);
    CHECK(r.out.find("protocol") != std::string::npos);
  }
}
