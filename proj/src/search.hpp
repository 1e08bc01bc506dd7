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

// Mask search drivers: evolutionary search over negativity scores, plus the
// leave-one-out, greedy, random and exhaustive baselines.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "cma_es.hpp"
#include "fitness.hpp"
#include "mask_codec.hpp"
#include "merge_engine.hpp"

namespace negmerge {

/// One evaluator per worker. Worker i only ever touches workers[i], so
/// evaluators that own a child process need no locking.
struct EvaluatorPool {
  std::vector<Evaluator*> workers;
  std::size_t size() const { return workers.size(); }
};

struct SearchConfig {
  std::size_t pop = 16;
  std::size_t generations = 60;
  double sigma0 = 0.5;
  double max_prune = 0.2;  // k
  double mu0 = -1.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct GenerationRecord {
  std::size_t generation = 0;
  double best_val_fitness = 0;   // best candidate of this generation
  double best_ever_fitness = 0;  // running maximum, baseline included
  std::size_t popcount = 0;      // of this generation's best candidate
  double seconds = 0;            // wall clock, kept out of the deterministic trace
};

struct SearchResult {
  Vector best_latent;
  PruningMask best_mask;
  double best_fitness = 0;
  TaskAccuracy best_accuracy;
  double baseline_fitness = 0;
  TaskAccuracy baseline_accuracy;
  std::vector<GenerationRecord> trace;
  std::size_t evaluations = 0;
};

struct SearchHooks {
  // When set, state is written here after every generation and the search
  // continues from it if the files already exist.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(const GenerationRecord&)> on_generation;
};

SearchResult run_enmp(const ModuleGrid& grid, const MergeParams& params, const SearchConfig& cfg,
                      EvaluatorPool& pool, const ExpertScores& experts, const SearchHooks& hooks = {});

struct MaskScore {
  double fitness = 0;
  TaskAccuracy accuracy;
};

// Scores masks on the pool, results in input order. `streams[i]` seeds the
// subsample for mask i. Evaluator-reported failures score NaN; transport
// failures propagate.
std::vector<MaskScore> evaluate_masks(const ModuleGrid& grid, const MergeParams& params,
                                      const std::vector<PruningMask>& masks, const std::vector<std::uint64_t>& streams,
                                      EvaluatorPool& pool, const ExpertScores& experts);

struct LeaveOneOut {
  double baseline = 0;
  Matrix impact;  // L x T: fitness(unit removed) - baseline
};
LeaveOneOut leave_one_out(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                          const ExpertScores& experts);

struct GreedyResult {
  PruningMask mask;
  double fitness = 0;
  LeaveOneOut analysis;
};
// Removes every unit with strictly positive leave-one-out impact at once.
GreedyResult greedy_prune(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                          const ExpertScores& experts);

// Uniform mask with exactly round(sparsity * n) pruned units.
FlatMask random_prune(std::size_t n, double sparsity, Rng& rng);

struct OracleResult {
  PruningMask mask;
  double fitness = 0;
  std::size_t evaluated = 0;
};
inline constexpr std::size_t kMaxExhaustiveUnits = 16;
// Every mask within the floor(k * N) budget; ties go to the lexicographically
// smallest flat mask.
OracleResult exhaustive_oracle(const ModuleGrid& grid, const MergeParams& params, EvaluatorPool& pool,
                               const ExpertScores& experts, double max_prune);

}  // namespace negmerge
