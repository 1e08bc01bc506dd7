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

#include "negmerge/negmerge.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "commands.hpp"
#include "fitness.hpp"
#include "mask_codec.hpp"

using nlohmann::json;
using negmerge::ErrorCode;

struct nm_session {
  negmerge::RunConfig cfg;
  std::unique_ptr<negmerge::Workspace> ws;

  negmerge::Workspace& workspace() {
    if (!ws) ws = std::make_unique<negmerge::Workspace>(cfg);
    return *ws;
  }
};

struct nm_adapter {
  negmerge::AdapterCheckpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

nm_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return NM_ERR_INVALID_ARGUMENT;
    case ErrorCode::io: return NM_ERR_IO;
    case ErrorCode::schema: return NM_ERR_SCHEMA;
    case ErrorCode::shape: return NM_ERR_SHAPE;
    case ErrorCode::config: return NM_ERR_CONFIG;
    case ErrorCode::protocol: return NM_ERR_PROTOCOL;
    case ErrorCode::timeout: return NM_ERR_TIMEOUT;
    case ErrorCode::evaluator: return NM_ERR_EVALUATOR;
    case ErrorCode::unsupported: return NM_ERR_UNSUPPORTED;
    case ErrorCode::internal: return NM_ERR_INTERNAL;
  }
  return NM_ERR_INTERNAL;
}

template <typename F>
nm_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return NM_OK;
  } catch (const negmerge::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return NM_ERR_SCHEMA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return NM_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return NM_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return NM_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool ok, const char* what) {
  if (!ok) negmerge::fail(ErrorCode::invalid_argument, what);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto x = std::stoull(v, &used);
    if (used == v.size()) return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
  }
  negmerge::fail(ErrorCode::config, key + " expects a non-negative integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  negmerge::fail(ErrorCode::config, key + " expects a number, got '" + v + "'");
}

}  // namespace

extern "C" {

const char* nm_version(void) { return "0.1.0"; }

const char* nm_last_error(void) { return g_last_error.c_str(); }

const char* nm_status_name(nm_status status) {
  switch (status) {
    case NM_OK: return "ok";
    case NM_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case NM_ERR_IO: return "io";
    case NM_ERR_SCHEMA: return "schema";
    case NM_ERR_SHAPE: return "shape";
    case NM_ERR_CONFIG: return "config";
    case NM_ERR_PROTOCOL: return "protocol";
    case NM_ERR_TIMEOUT: return "timeout";
    case NM_ERR_EVALUATOR: return "evaluator";
    case NM_ERR_UNSUPPORTED: return "unsupported";
    case NM_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

int nm_exit_code(nm_status status) {
  switch (status) {
    case NM_OK: return 0;
    case NM_ERR_INVALID_ARGUMENT:
    case NM_ERR_IO:
    case NM_ERR_SCHEMA:
    case NM_ERR_SHAPE:
    case NM_ERR_CONFIG:
    case NM_ERR_UNSUPPORTED: return 2;
    default: return 1;
  }
}

void nm_set_log_callback(nm_log_fn fn, void* user, nm_log_level min_level) {
  if (!fn) {
    negmerge::set_log_sink(negmerge::default_log_sink());
    return;
  }
  negmerge::set_log_sink([fn, user, min_level](negmerge::LogLevel level, std::string_view msg) {
    if (static_cast<int>(level) < static_cast<int>(min_level)) return;
    const std::string text(msg);
    fn(static_cast<nm_log_level>(level), text.c_str(), user);
  });
}

nm_status nm_session_open(const char* config_path, nm_session** out) {
  return guarded([&] {
    require(config_path && out, "config_path and out must be non-null");
    *out = nullptr;
    auto s = std::make_unique<nm_session>();
    s->cfg = negmerge::load_config(config_path);
    *out = s.release();
  });
}

nm_status nm_session_open_json(const char* config_json, const char* base_dir, nm_session** out) {
  return guarded([&] {
    require(config_json && out, "config_json and out must be non-null");
    *out = nullptr;
    const json j = json::parse(config_json, nullptr, false, true);
    if (j.is_discarded()) negmerge::fail(ErrorCode::config, "config is not valid JSON");
    auto s = std::make_unique<nm_session>();
    s->cfg = negmerge::parse_config(j, base_dir ? base_dir : "");
    *out = s.release();
  });
}

nm_status nm_session_set(nm_session* session, const char* key, const char* value) {
  return guarded([&] {
    require(session && key && value, "session, key and value must be non-null");
    if (session->ws) negmerge::fail(ErrorCode::invalid_argument, "options must be set before the first command");
    const std::string k = key, v = value;
    auto cfg = session->cfg;
    if (k == "search.pop") cfg.search.pop = parse_size(k, v);
    else if (k == "search.generations") cfg.search.generations = parse_size(k, v);
    else if (k == "search.sigma0") cfg.search.sigma0 = parse_double(k, v);
    else if (k == "search.max_prune") cfg.search.max_prune = parse_double(k, v);
    else if (k == "search.seed") cfg.search.seed = parse_size(k, v);
    else if (k == "search.parallel") cfg.parallel = parse_size(k, v);
    else if (k == "search.subsample") cfg.subsample = parse_size(k, v);
    else if (k == "output_dir") cfg.output_dir = v;
    else negmerge::fail(ErrorCode::config, "unknown option '" + k + "'");
    cfg.validate();
    session->cfg = std::move(cfg);
  });
}

nm_status nm_session_config(nm_session* session, char** config_json) {
  return guarded([&] {
    require(session && config_json, "session and config_json must be non-null");
    *config_json = dup_string(session->cfg.to_json().dump(2));
  });
}

void nm_session_close(nm_session* session) { delete session; }

nm_status nm_cmd_merge(nm_session* session, const char* mask_path, char** report) {
  return guarded([&] {
    require(session && report, "session and report must be non-null");
    std::optional<std::filesystem::path> mask;
    if (mask_path) mask = mask_path;
    *report = dup_string(negmerge::cmd_merge(session->workspace(), mask).dump(2));
  });
}

nm_status nm_cmd_search(nm_session* session, const char* resume_checkpoint, char** report) {
  return guarded([&] {
    require(session && report, "session and report must be non-null");
    negmerge::SearchOptions opts;
    if (resume_checkpoint) opts.resume = resume_checkpoint;
    *report = dup_string(negmerge::cmd_search(session->workspace(), opts).dump(2));
  });
}

nm_status nm_cmd_inspect(nm_session* session, const char* mode, double sparsity, size_t seeds, char** report) {
  return guarded([&] {
    require(session && mode && report, "session, mode and report must be non-null");
    negmerge::InspectOptions opts;
    const std::string m = mode;
    if (m == "leave-one-out") opts.mode = negmerge::InspectMode::leave_one_out;
    else if (m == "greedy") opts.mode = negmerge::InspectMode::greedy;
    else if (m == "random") opts.mode = negmerge::InspectMode::random;
    else negmerge::fail(ErrorCode::config, "unknown inspect mode '" + m + "'");
    opts.sparsity = sparsity;
    opts.seeds = seeds;
    *report = dup_string(negmerge::cmd_inspect(session->workspace(), opts).dump(2));
  });
}

nm_status nm_cmd_eval(nm_session* session, const char* delta_path, char** report) {
  return guarded([&] {
    require(session && delta_path && report, "session, delta_path and report must be non-null");
    *report = dup_string(negmerge::cmd_eval(session->workspace(), delta_path).dump(2));
  });
}

nm_status nm_export_testbed(const char* spec_json, const char* dir, char** report) {
  return guarded([&] {
    require(dir && report, "dir and report must be non-null");
    negmerge::TestbedSpec spec;
    if (spec_json) {
      const json j = json::parse(spec_json, nullptr, false);
      if (j.is_discarded()) negmerge::fail(ErrorCode::config, "testbed spec is not valid JSON");
      spec = negmerge::TestbedSpec::from_json(j);
    }
    *report = dup_string(negmerge::cmd_export_testbed(spec, dir).dump(2));
  });
}

void nm_string_free(char* s) { std::free(s); }

nm_status nm_map_latent(const double* z, size_t n, double k, uint8_t* mask_out) {
  return guarded([&] {
    require((z && mask_out) || n == 0, "z and mask_out must be non-null");
    const auto mask = negmerge::map_latent(Eigen::Map<const negmerge::Vector>(z, static_cast<Eigen::Index>(n)), k);
    if (n) std::memcpy(mask_out, mask.data(), n);
  });
}

nm_status nm_normalized_accuracy(double merged, double expert, double* out) {
  return guarded([&] {
    require(out != nullptr, "out must be non-null");
    *out = negmerge::normalized_accuracy(merged, expert);
  });
}

nm_status nm_adapter_load(const char* path, const char* naming_json, nm_adapter** out) {
  return guarded([&] {
    require(path && out, "path and out must be non-null");
    *out = nullptr;
    auto naming = negmerge::NamingScheme::canonical();
    if (naming_json) {
      const json j = json::parse(naming_json, nullptr, false);
      if (j.is_discarded()) negmerge::fail(ErrorCode::config, "naming is not valid JSON");
      naming = negmerge::NamingScheme::from_json(j);
    }
    auto a = std::make_unique<nm_adapter>();
    a->ckpt = negmerge::load_adapter(path, naming);
    *out = a.release();
  });
}

nm_status nm_adapter_info(const nm_adapter* adapter, char** info_json) {
  return guarded([&] {
    require(adapter && info_json, "adapter and info_json must be non-null");
    const auto& c = adapter->ckpt;
    json shapes = json::object();
    for (negmerge::Projection p : negmerge::kProjections) {
      const auto& f = c.layers.front()[p];
      shapes[std::string(negmerge::projection_name(p))] = {{"A", {f.a.rows(), f.a.cols()}}, {"B", {f.b.rows(), f.b.cols()}}};
    }
    const json info = {{"task_name", c.task_name}, {"num_layers", c.num_layers()}, {"rank", c.rank},
                       {"alpha", c.alpha},         {"scale", c.scale()},          {"shapes", shapes}};
    *info_json = dup_string(info.dump(2));
  });
}

void nm_adapter_free(nm_adapter* adapter) { delete adapter; }

}  // extern "C"
