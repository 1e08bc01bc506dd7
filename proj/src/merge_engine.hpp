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

// Aggregation rules for task deltas and the masked merge over a module grid.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adapter_store.hpp"
#include "mask_codec.hpp"

namespace negmerge {

enum class MergeMethod { ta, ties, dare, tsv, knots, corespace };
enum class MergeOrder { prune_then_align, align_then_prune };

std::string_view method_name(MergeMethod m);
std::optional<MergeMethod> parse_method(std::string_view name);
std::string_view order_name(MergeOrder o);
std::optional<MergeOrder> parse_order(std::string_view name);

struct MergeParams {
  MergeMethod method = MergeMethod::ta;
  double lambda = 1.0;
  double density = 1.0;    // fraction kept by magnitude trimming
  double drop_rate = 0.0;  // DARE p
  // Rule applied inside knots/corespace. Unset means ties for knots and tsv
  // for corespace.
  std::optional<MergeMethod> inner_method;
  std::uint64_t seed = 0;
  bool dare_sum = false;  // aggregate DARE survivors by summation instead of TIES
  MergeOrder order = MergeOrder::prune_then_align;

  MergeMethod inner() const;
  void validate() const;
  nlohmann::json to_json() const;

  // Llama-3 NLP column of the published hyperparameter table.
  static MergeParams nlp_defaults(MergeMethod method);
};

// Per-layer building blocks. Every `units` argument holds same-shaped deltas.
Matrix merge_ta(const std::vector<Matrix>& units, double lambda, Eigen::Index rows = 0, Eigen::Index cols = 0);
Matrix trim_topk(const Matrix& delta, double density);
// +1 / -1 per entry; a tie (including all-zero) elects +1.
Matrix elect_sign(const std::vector<Matrix>& trimmed);
Matrix merge_ties(const std::vector<Matrix>& units, double lambda, double density);
// Drop-and-rescale one unit. Entry (i, j) of task `task` survives iff a hash
// of (seed, task, row-major flat index) clears p.
Matrix dare_sparsify(const Matrix& delta, double drop_rate, std::uint64_t seed, std::size_t task);
Matrix merge_dare(const std::vector<Matrix>& units, const std::vector<std::size_t>& task_ids, double lambda,
                  double density, double drop_rate, std::uint64_t seed, bool sum = false);

struct TsvParts {
  Matrix u_perp;
  Vector sigma_block;
  Matrix v_perp;
};
// Truncated per-task SVDs, concatenation and the Procrustes orthogonalization.
// ranks[t] caps the components kept from task t.
TsvParts tsv_decompose(const std::vector<Matrix>& units, const std::vector<int>& ranks);
Matrix merge_tsv(const std::vector<Matrix>& units, double lambda, const std::vector<int>& ranks);

// `basis_units` define the shared subspace; `merge_units` (indices into
// basis_units) are merged inside it. Both orders reduce to this.
Matrix merge_knots(const std::vector<Matrix>& basis_units, const std::vector<std::size_t>& merge_units,
                   double lambda, const MergeParams& inner);
Matrix merge_knots(const std::vector<Matrix>& units, double lambda, const MergeParams& inner);

struct CoreBases {
  Matrix u_b;  // d_out x k_b
  Matrix v_a;  // d_in x k_a
};
CoreBases corespace_bases(const std::vector<Matrix>& bs, const std::vector<Matrix>& as);
Matrix merge_corespace(const std::vector<Matrix>& bs, const std::vector<Matrix>& as,
                       const std::vector<std::size_t>& merge_units, double lambda, const MergeParams& inner);
Matrix merge_corespace(const std::vector<Matrix>& bs, const std::vector<Matrix>& as, double lambda,
                       const MergeParams& inner);

// Task indices kept at `layer` (m_{l,t} = 0), in task order.
std::vector<std::size_t> retained_set(const ModuleGrid& grid, const PruningMask& mask, std::size_t layer);

MergedDelta merge_with_mask(const ModuleGrid& grid, const PruningMask& mask, const MergeParams& params);
inline MergedDelta merge_all(const ModuleGrid& grid, const MergeParams& params) {
  return merge_with_mask(grid, PruningMask::zeros(grid.num_layers(), grid.num_tasks()), params);
}

}  // namespace negmerge
