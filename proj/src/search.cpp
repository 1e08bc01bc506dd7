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

#include "search.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

namespace negmerge {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json num(double x) { return std::isnan(x) ? json(nullptr) : json(x); }
double num(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

// Runs job(i, evaluator) for i in [0, n) on the pool. The lowest-index
// exception wins and is rethrown after every worker has stopped.
void run_jobs(std::size_t n, EvaluatorPool& pool, const std::function<void(std::size_t, Evaluator&)>& job) {
  if (pool.workers.empty()) fail(ErrorCode::invalid_argument, "evaluator pool is empty");
  const std::size_t threads = std::min(pool.size(), n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex err_mu;
  std::size_t err_index = n;
  std::exception_ptr err;

  auto worker = [&](std::size_t w) {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        job(i, *pool.workers[w]);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (i < err_index) {
          err_index = i;
          err = std::current_exception();
        }
        stop.store(true);
      }
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::jthread> ts;
    for (std::size_t w = 0; w < threads; ++w) ts.emplace_back(worker, w);
  }
  if (err) std::rethrow_exception(err);
}

bool is_reported_failure(const Error& e) { return e.code() == ErrorCode::evaluator; }

json trace_to_json(const std::vector<GenerationRecord>& trace) {
  json out = json::array();
  for (const auto& r : trace) {
    out.push_back({{"generation", r.generation},
                   {"best_val_fitness", num(r.best_val_fitness)},
                   {"best_ever_fitness", num(r.best_ever_fitness)},
                   {"popcount", r.popcount},
                   {"seconds", r.seconds}});
  }
  return out;
}

std::vector<GenerationRecord> trace_from_json(const json& j) {
  std::vector<GenerationRecord> out;
  for (const auto& r : j) {
    out.push_back({r.at("generation").get<std::size_t>(), num(r.at("best_val_fitness")),
                   num(r.at("best_ever_fitness")), r.at("popcount").get<std::size_t>(),
                   r.at("seconds").get<double>()});
  }
  return out;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

struct SearchState {
  CmaState cma;
  Rng rng{0};
  SearchResult result;
};

std::filesystem::path cov_path_for(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".cov";
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const SearchState& st, const SearchConfig& cfg,
                     const MergeParams& params, const ModuleGrid& grid) {
  const auto& r = st.result;
  json j = {
      {"format", "negmerge-search-checkpoint"},
      {"version", 1},
      {"search", cfg.to_json()},
      {"merge", params.to_json()},
      {"grid", {{"L", grid.num_layers()}, {"T", grid.num_tasks()}}},
      {"cma", st.cma.to_json()},
      {"covariance_file", cov_path_for(path).filename().string()},
      {"rng", st.rng.save()},
      {"best",
       {{"latent", to_vec(r.best_latent)},
        {"mask", r.best_mask.bits},
        {"fitness", num(r.best_fitness)},
        {"accuracy", r.best_accuracy}}},
      {"baseline", {{"fitness", num(r.baseline_fitness)}, {"accuracy", r.baseline_accuracy}}},
      {"trace", trace_to_json(r.trace)},
      {"evaluations", r.evaluations},
  };
  // Write both files beside their final names, then rename, so a crash never
  // leaves a torn checkpoint.
  auto tmp_json = path;
  tmp_json += ".tmp";
  auto tmp_cov = cov_path_for(path);
  tmp_cov += ".tmp";
  st.cma.save_cov(tmp_cov);
  {
    std::ofstream out(tmp_json, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + tmp_json.string());
    out << j.dump(1) << '\n';
    if (!out) fail(ErrorCode::io, "write failed for " + tmp_json.string());
  }
  std::filesystem::rename(tmp_cov, cov_path_for(path));
  std::filesystem::rename(tmp_json, path);
}

SearchState load_checkpoint(const std::filesystem::path& path, const SearchConfig& cfg, const ModuleGrid& grid) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open checkpoint " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "negmerge-search-checkpoint") {
    fail(ErrorCode::schema, path.string() + " is not a search checkpoint");
  }
  try {
    const auto saved = j.at("search");
    const auto same = [&](const char* key, const json& now) {
      if (saved.at(key) != now) {
        fail(ErrorCode::config, "checkpoint was written with " + std::string(key) + "=" + saved.at(key).dump() +
                                    ", current run uses " + now.dump());
      }
    };
    const json cur = cfg.to_json();
    for (const char* key : {"pop", "sigma0", "max_prune", "mu0", "seed"}) same(key, cur.at(key));
    if (j.at("grid").at("L") != grid.num_layers() || j.at("grid").at("T") != grid.num_tasks()) {
      fail(ErrorCode::config, "checkpoint grid dimensions differ from the current adapters");
    }
    SearchState st{CmaState::from_json(j.at("cma"), path.parent_path() / j.at("covariance_file").get<std::string>()), Rng{0}, {}};
    st.rng.restore(j.at("rng").get<std::string>());
    auto& r = st.result;
    const auto& best = j.at("best");
    const auto latent = best.at("latent").get<std::vector<double>>();
    r.best_latent = Eigen::Map<const Vector>(latent.data(), static_cast<Eigen::Index>(latent.size()));
    r.best_mask = reshape_mask(best.at("mask").get<FlatMask>(), grid.num_layers(), grid.num_tasks());
    r.best_fitness = num(best.at("fitness"));
    r.best_accuracy = best.at("accuracy").get<TaskAccuracy>();
    r.baseline_fitness = num(j.at("baseline").at("fitness"));
    r.baseline_accuracy = j.at("baseline").at("accuracy").get<TaskAccuracy>();
    r.trace = trace_from_json(j.at("trace"));
    r.evaluations = j.at("evaluations").get<std::size_t>();
    return st;
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, path.string() + ": " + e.what());
  }
}

}  // namespace

void SearchConfig::validate() const {
  if (pop < 2) fail(ErrorCode::config, "pop must be at least 2");
  if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) fail(ErrorCode::config, "sigma must be positive");
  if (!(max_prune >= 0.0 && max_prune < 1.0)) fail(ErrorCode::config, "max_prune must lie in [0, 1)");
  if (!std::isfinite(mu0)) fail(ErrorCode::config, "mu0 must be finite");
}

json SearchConfig::to_json() const {
  return {{"pop", pop}, {"generations", generations}, {"sigma0", sigma0},
          {"max_prune", max_prune}, {"mu0", mu0}, {"seed", seed}};
}

std::vector<MaskScore> evaluate_masks(const ModuleGrid& grid, const MergeParams& params,
                                      const std::vector<PruningMask>& masks, const std::vector<std::uint64_t>& streams,
                                      EvaluatorPool& pool, const ExpertScores& experts) {
  if (masks.size() != streams.size()) fail(ErrorCode::invalid_argument, "one stream per mask");
  std::vector<MaskScore> out(masks.size());
  run_jobs(masks.size(), pool, [&](std::size_t i, Evaluator& ev) {
    const auto delta = merge_with_mask(grid, masks[i], params);
    try {
      out[i].accuracy = ev.evaluate(delta, streams[i]);
      out[i].fitness = fitness(out[i].accuracy, experts);
    } catch (const Error& e) {
      if (!is_reported_failure(e)) throw Error(e.code(), "candidate " + std::to_string(i) + ": " + e.what());
      warn("candidate " + std::to_string(i) + " failed: " + e.what());
      out[i].fitness = kNaN;
    }
  });
  return out;
}

SearchResult run_enmp(const ModuleGrid& grid, const MergeParams& params, const SearchConfig& cfg,
                      EvaluatorPool& pool, const ExpertScores& experts, const SearchHooks& hooks) {
  cfg.validate();
  params.validate();
  const std::size_t n = grid.num_units();
  const std::size_t L = grid.num_layers(), T = grid.num_tasks();

  SearchState st{CmaState::init(n, Vector::Constant(static_cast<Eigen::Index>(n), cfg.mu0), cfg.sigma0, cfg.pop), Rng{0}, {}};
  const bool resuming = hooks.checkpoint && std::filesystem::exists(*hooks.checkpoint);
  if (resuming) {
    st = load_checkpoint(*hooks.checkpoint, cfg, grid);
    info("resuming at generation " + std::to_string(st.cma.generation()));
  } else {
    st.rng = Rng(cfg.seed);
    // The unmasked merge is scored once so the result can never fall below
    // it. It does not enter the CMA-ES update.
    const auto base = evaluate_masks(grid, params, {PruningMask::zeros(L, T)},
                                     {derive_stream(cfg.seed, 0, cfg.pop)}, pool, experts);
    auto& r = st.result;
    r.baseline_fitness = base[0].fitness;
    r.baseline_accuracy = base[0].accuracy;
    r.best_latent = st.cma.mean();
    r.best_mask = PruningMask::zeros(L, T);
    r.best_fitness = base[0].fitness;
    r.best_accuracy = base[0].accuracy;
    r.evaluations = 1;
  }

  auto& r = st.result;
  for (std::size_t g = st.cma.generation(); g < cfg.generations; ++g) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cands = st.cma.ask(st.rng);
    std::vector<PruningMask> masks;
    std::vector<std::uint64_t> streams;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      masks.push_back(reshape_mask(map_latent(cands[i], cfg.max_prune), L, T));
      streams.push_back(derive_stream(cfg.seed, g, i));
    }
    std::vector<MaskScore> scores;
    try {
      scores = evaluate_masks(grid, params, masks, streams, pool, experts);
    } catch (const Error& e) {
      throw Error(e.code(), "generation " + std::to_string(g) + ", " + e.what());
    }
    r.evaluations += scores.size();

    std::vector<double> fit(scores.size());
    std::size_t gen_best = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      fit[i] = scores[i].fitness;
      if (!std::isnan(fit[i]) && (gen_best == scores.size() || fit[i] > fit[gen_best])) gen_best = i;
    }
    GenerationRecord rec;
    rec.generation = g;
    rec.best_val_fitness = kNaN;
    if (gen_best < scores.size()) {
      rec.best_val_fitness = fit[gen_best];
      rec.popcount = masks[gen_best].popcount();
      if (std::isnan(r.best_fitness) || fit[gen_best] > r.best_fitness) {
        r.best_fitness = fit[gen_best];
        r.best_latent = cands[gen_best];
        r.best_mask = masks[gen_best];
        r.best_accuracy = scores[gen_best].accuracy;
      }
    }
    rec.best_ever_fitness = r.best_fitness;
    st.cma.tell(cands, fit);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.trace.push_back(rec);
    if (hooks.checkpoint) save_checkpoint(*hooks.checkpoint, st, cfg, params, grid);
    if (hooks.on_generation) hooks.on_generation(rec);
  }
  return r;
}

LeaveOneOut leave_one_out(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                          const ExpertScores& experts) {
  const std::size_t L = grid.num_layers(), T = grid.num_tasks();
  std::vector<PruningMask> masks{PruningMask::zeros(L, T)};
  for (std::size_t u = 0; u < L * T; ++u) {
    masks.push_back(PruningMask::zeros(L, T));
    masks.back().bits[u] = 1;
  }
  // A single stream pairs every comparison on the same validation items.
  const auto scores = evaluate_masks(grid, params, masks, std::vector<std::uint64_t>(masks.size(), 0), pool, experts);
  LeaveOneOut out;
  out.baseline = scores[0].fitness;
  out.impact.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(T));
  for (std::size_t u = 0; u < L * T; ++u) {
    out.impact(static_cast<Eigen::Index>(u / T), static_cast<Eigen::Index>(u % T)) = scores[u + 1].fitness - out.baseline;
  }
  return out;
}

GreedyResult greedy_prune(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                          const ExpertScores& experts) {
  GreedyResult out;
  out.analysis = leave_one_out(grid, params, pool, experts);
  const std::size_t L = grid.num_layers(), T = grid.num_tasks();
  out.mask = PruningMask::zeros(L, T);
  for (std::size_t u = 0; u < L * T; ++u) {
    out.mask.bits[u] = out.analysis.impact(static_cast<Eigen::Index>(u / T), static_cast<Eigen::Index>(u % T)) > 0.0;
  }
  out.fitness = evaluate_masks(grid, params, {out.mask}, {0}, pool, experts)[0].fitness;
  return out;
}

FlatMask random_prune(std::size_t n, double sparsity, Rng& rng) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) fail(ErrorCode::invalid_argument, "sparsity must lie in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  FlatMask mask(n, 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
    mask[idx[i]] = 1;
  }
  return mask;
}

OracleResult exhaustive_oracle(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                               const ExpertScores& experts, double max_prune) {
  const std::size_t n = grid.num_units();
  if (n > kMaxExhaustiveUnits) {
    fail(ErrorCode::invalid_argument, "exhaustive search is capped at " + std::to_string(kMaxExhaustiveUnits) +
                                          " units, grid has " + std::to_string(n));
  }
  if (!(max_prune >= 0.0 && max_prune < 1.0)) fail(ErrorCode::invalid_argument, "max_prune must lie in [0, 1)");
  const std::size_t budget = prune_budget(n, max_prune);
  std::vector<PruningMask> masks;
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(std::popcount(bits)) > budget) continue;
    auto m = PruningMask::zeros(grid.num_layers(), grid.num_tasks());
    for (std::size_t j = 0; j < n; ++j) m.bits[j] = (bits >> j) & 1u;
    masks.push_back(std::move(m));
  }
  const auto scores = evaluate_masks(grid, params, masks, std::vector<std::uint64_t>(masks.size(), 0), pool, experts);
  OracleResult out;
  out.evaluated = masks.size();
  out.fitness = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const double f = scores[i].fitness;
    if (std::isnan(f)) continue;
    if (f > out.fitness || (f == out.fitness && masks[i].bits < out.mask.bits)) {
      out.fitness = f;
      out.mask = masks[i];
    }
  }
  if (out.mask.bits.empty()) fail(ErrorCode::evaluator, "every mask failed to evaluate");
  return out;
}

}  // namespace negmerge
