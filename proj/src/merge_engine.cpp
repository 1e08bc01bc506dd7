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

#include "merge_engine.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>

#include "linalg.hpp"
#include "random.hpp"

namespace negmerge {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 6> kMethodNames = {"ta", "ties", "dare", "tsv", "knots", "corespace"};

void check_same_shape(const std::vector<Matrix>& units) {
  for (std::size_t i = 1; i < units.size(); ++i) {
    if (units[i].rows() != units[0].rows() || units[i].cols() != units[0].cols()) {
      fail(ErrorCode::shape, "unit " + std::to_string(i) + " is " + std::to_string(units[i].rows()) + "x" +
                                 std::to_string(units[i].cols()) + " but unit 0 is " +
                                 std::to_string(units[0].rows()) + "x" + std::to_string(units[0].cols()));
    }
  }
}

Matrix hcat(const std::vector<Matrix>& ms) {
  Eigen::Index cols = 0;
  for (const auto& m : ms) cols += m.cols();
  Matrix out(ms.front().rows(), cols);
  Eigen::Index c = 0;
  for (const auto& m : ms) {
    out.middleCols(c, m.cols()) = m;
    c += m.cols();
  }
  return out;
}

Matrix vcat(const std::vector<Matrix>& ms) {
  Eigen::Index rows = 0;
  for (const auto& m : ms) rows += m.rows();
  Matrix out(rows, ms.front().cols());
  Eigen::Index r = 0;
  for (const auto& m : ms) {
    out.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return out;
}

// Merge rule applied to aligned components (KnOTS V_t, CoreSpace cores).
// Scaling is applied once by the caller, so the inner rule runs at lambda 1.
Matrix inner_merge(const std::vector<Matrix>& mats, const std::vector<std::size_t>& task_ids,
                   const std::vector<int>& ranks, const MergeParams& p) {
  switch (p.inner()) {
    case MergeMethod::ta: return merge_ta(mats, 1.0);
    case MergeMethod::ties: return merge_ties(mats, 1.0, p.density);
    case MergeMethod::dare: return merge_dare(mats, task_ids, 1.0, p.density, p.drop_rate, p.seed, p.dare_sum);
    case MergeMethod::tsv: return merge_tsv(mats, 1.0, ranks);
    default: fail(ErrorCode::config, "inner merge cannot be " + std::string(method_name(p.inner())));
  }
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v.at(i));
  return out;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::string_view method_name(MergeMethod m) { return kMethodNames[static_cast<std::size_t>(m)]; }

std::optional<MergeMethod> parse_method(std::string_view name) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (kMethodNames[i] == name) return static_cast<MergeMethod>(i);
  }
  return std::nullopt;
}

std::string_view order_name(MergeOrder o) {
  return o == MergeOrder::prune_then_align ? "prune_then_align" : "align_then_prune";
}

std::optional<MergeOrder> parse_order(std::string_view name) {
  if (name == "prune_then_align") return MergeOrder::prune_then_align;
  if (name == "align_then_prune") return MergeOrder::align_then_prune;
  return std::nullopt;
}

MergeMethod MergeParams::inner() const {
  if (inner_method) return *inner_method;
  return method == MergeMethod::corespace ? MergeMethod::tsv : MergeMethod::ties;
}

void MergeParams::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) fail(ErrorCode::config, "lambda must be a positive number");
  if (!(density > 0.0 && density <= 1.0)) fail(ErrorCode::config, "density must lie in (0, 1]");
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) fail(ErrorCode::config, "drop_rate must lie in [0, 1)");
  const auto in = inner();
  if (in == MergeMethod::knots || in == MergeMethod::corespace) {
    fail(ErrorCode::config, "inner_method cannot be " + std::string(method_name(in)));
  }
  if (method == MergeMethod::knots && in != MergeMethod::ta && in != MergeMethod::ties) {
    fail(ErrorCode::config, "knots supports inner_method ta or ties");
  }
}

json MergeParams::to_json() const {
  json j = {{"method", method_name(method)}, {"lambda", lambda}, {"density", density},
            {"drop_rate", drop_rate},       {"seed", seed},     {"order", order_name(order)}};
  if (method == MergeMethod::knots || method == MergeMethod::corespace) j["inner_method"] = method_name(inner());
  if (method == MergeMethod::dare || inner() == MergeMethod::dare) j["dare_aggregation"] = dare_sum ? "sum" : "ties";
  return j;
}

MergeParams MergeParams::nlp_defaults(MergeMethod method) {
  MergeParams p;
  p.method = method;
  switch (method) {
    case MergeMethod::ta: p.lambda = 0.3; break;
    case MergeMethod::ties: p.lambda = 1.2; p.density = 0.8; break;
    case MergeMethod::dare: p.lambda = 1.1; p.density = 0.8; p.drop_rate = 0.1; break;
    case MergeMethod::tsv: p.lambda = 0.6; break;
    case MergeMethod::knots: p.lambda = 1.1; p.density = 0.9; p.inner_method = MergeMethod::ties; break;
    case MergeMethod::corespace: p.lambda = 0.5; p.inner_method = MergeMethod::tsv; break;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Element-wise rules

Matrix merge_ta(const std::vector<Matrix>& units, double lambda, Eigen::Index rows, Eigen::Index cols) {
  if (units.empty()) return Matrix::Zero(rows, cols);
  check_same_shape(units);
  Matrix acc = units[0];
  for (std::size_t i = 1; i < units.size(); ++i) acc += units[i];
  acc *= lambda;
  return acc;
}

Matrix trim_topk(const Matrix& delta, double density) {
  if (!(density > 0.0 && density <= 1.0)) fail(ErrorCode::invalid_argument, "density must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(delta.size());
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-9)));
  if (keep == n) return delta;

  const auto cols = delta.cols();
  auto at = [&](std::size_t flat) {
    return delta(static_cast<Eigen::Index>(flat) / cols, static_cast<Eigen::Index>(flat) % cols);
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(at(a)) > std::abs(at(b)); });
  Matrix out = Matrix::Zero(delta.rows(), cols);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto f = static_cast<Eigen::Index>(order[i]);
    out(f / cols, f % cols) = delta(f / cols, f % cols);
  }
  return out;
}

Matrix elect_sign(const std::vector<Matrix>& trimmed) {
  if (trimmed.empty()) fail(ErrorCode::invalid_argument, "sign election needs at least one unit");
  check_same_shape(trimmed);
  Matrix pos = Matrix::Zero(trimmed[0].rows(), trimmed[0].cols());
  Matrix neg = pos;
  for (const auto& m : trimmed) {
    pos += m.cwiseMax(0.0);
    neg -= m.cwiseMin(0.0);
  }
  return (pos.array() >= neg.array()).select(Matrix::Ones(pos.rows(), pos.cols()),
                                             -Matrix::Ones(pos.rows(), pos.cols()));
}

Matrix merge_ties(const std::vector<Matrix>& units, double lambda, double density) {
  if (units.empty()) fail(ErrorCode::invalid_argument, "TIES needs at least one unit");
  check_same_shape(units);
  std::vector<Matrix> trimmed;
  trimmed.reserve(units.size());
  for (const auto& u : units) trimmed.push_back(trim_topk(u, density));
  const Matrix sign = elect_sign(trimmed);

  Matrix sum = Matrix::Zero(sign.rows(), sign.cols());
  Matrix count = Matrix::Zero(sign.rows(), sign.cols());
  for (const auto& m : trimmed) {
    const auto agree = (m.array() != 0.0 && (m.array() > 0.0) == (sign.array() > 0.0)).cast<double>();
    sum.array() += agree * m.array();
    count.array() += agree;
  }
  Matrix out = (count.array() > 0.0).select(sum.array() / count.array().max(1.0), 0.0);
  out *= lambda;
  return out;
}

Matrix dare_sparsify(const Matrix& delta, double drop_rate, std::uint64_t seed, std::size_t task) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) fail(ErrorCode::invalid_argument, "drop_rate must lie in [0, 1)");
  if (drop_rate == 0.0) return delta;
  const double rescale = 1.0 / (1.0 - drop_rate);
  const std::uint64_t key = splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(task));
  Matrix out(delta.rows(), delta.cols());
  for (Eigen::Index i = 0; i < delta.rows(); ++i) {
    for (Eigen::Index j = 0; j < delta.cols(); ++j) {
      const auto flat = static_cast<std::uint64_t>(i * delta.cols() + j);
      const double u = static_cast<double>(splitmix64(key ^ splitmix64(flat)) >> 11) * 0x1.0p-53;
      out(i, j) = u < drop_rate ? 0.0 : delta(i, j) * rescale;
    }
  }
  return out;
}

Matrix merge_dare(const std::vector<Matrix>& units, const std::vector<std::size_t>& task_ids, double lambda,
                  double density, double drop_rate, std::uint64_t seed, bool sum) {
  if (units.size() != task_ids.size()) fail(ErrorCode::invalid_argument, "one task id per DARE unit");
  if (units.empty()) fail(ErrorCode::invalid_argument, "DARE needs at least one unit");
  std::vector<Matrix> dropped;
  dropped.reserve(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) dropped.push_back(dare_sparsify(units[i], drop_rate, seed, task_ids[i]));
  return sum ? merge_ta(dropped, lambda) : merge_ties(dropped, lambda, density);
}

// ---------------------------------------------------------------------------
// Spectral rules

TsvParts tsv_decompose(const std::vector<Matrix>& units, const std::vector<int>& ranks) {
  if (units.empty()) fail(ErrorCode::invalid_argument, "TSV needs at least one unit");
  check_same_shape(units);
  const auto rows = units[0].rows();
  const auto cols = units[0].cols();

  struct Component {
    double s;
    std::size_t task;
    Eigen::Index index;
  };
  std::vector<linalg::Svd> parts;
  std::vector<Component> comps;
  for (std::size_t t = 0; t < units.size(); ++t) {
    parts.push_back(linalg::svd(units[t]));
    auto k = linalg::numerical_rank(parts.back().s);
    if (t < ranks.size()) k = std::min<Eigen::Index>(k, ranks[t]);
    for (Eigen::Index i = 0; i < k; ++i) comps.push_back({parts.back().s[i], t, i});
  }
  const auto cap = static_cast<std::size_t>(std::min(rows, cols));
  if (comps.size() > cap) {
    // Small test grids hit this on every layer; once per process is enough.
    static std::once_flag warned;
    std::call_once(warned, [&] {
      warn("TSV: " + std::to_string(comps.size()) + " concatenated components exceed dimension " +
           std::to_string(cap) + "; keeping the largest " + std::to_string(cap));
    });
    std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) { return a.s > b.s; });
    comps.resize(cap);
    std::sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
      return a.task != b.task ? a.task < b.task : a.index < b.index;
    });
  }

  const auto k = static_cast<Eigen::Index>(comps.size());
  TsvParts out{Matrix::Zero(rows, k), Vector::Zero(k), Matrix::Zero(cols, k)};
  if (k == 0) return out;
  Matrix u_cat(rows, k), v_cat(cols, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto& comp = comps[static_cast<std::size_t>(c)];
    u_cat.col(c) = parts[comp.task].u.col(comp.index);
    v_cat.col(c) = parts[comp.task].v.col(comp.index);
    out.sigma_block[c] = comp.s;
  }
  out.u_perp = linalg::polar(u_cat);
  out.v_perp = linalg::polar(v_cat);
  return out;
}

Matrix merge_tsv(const std::vector<Matrix>& units, double lambda, const std::vector<int>& ranks) {
  const auto p = tsv_decompose(units, ranks);
  Matrix out = p.u_perp * p.sigma_block.asDiagonal() * p.v_perp.transpose();
  out *= lambda;
  return out;
}

Matrix merge_knots(const std::vector<Matrix>& basis_units, const std::vector<std::size_t>& merge_units,
                   double lambda, const MergeParams& inner, const std::vector<std::size_t>* task_ids) {
  if (basis_units.empty()) fail(ErrorCode::invalid_argument, "KnOTS needs at least one unit");
  check_same_shape(basis_units);
  const auto rows = basis_units[0].rows();
  const auto cols = basis_units[0].cols();
  if (merge_units.empty()) return Matrix::Zero(rows, cols);

  const auto dec = linalg::svd(hcat(basis_units));
  const auto k = linalg::numerical_rank(dec.s);
  std::vector<Matrix> vs;
  for (auto t : merge_units) vs.push_back(dec.v.block(static_cast<Eigen::Index>(t) * cols, 0, cols, k));
  const auto ids = task_ids ? *task_ids : merge_units;
  const Matrix v_merged = inner_merge(vs, ids, {}, inner);
  Matrix out = dec.u.leftCols(k) * dec.s.head(k).asDiagonal() * v_merged.transpose();
  out *= lambda;
  return out;
}

Matrix merge_knots(const std::vector<Matrix>& basis_units, const std::vector<std::size_t>& merge_units,
                   double lambda, const MergeParams& inner) {
  return merge_knots(basis_units, merge_units, lambda, inner, nullptr);
}

Matrix merge_knots(const std::vector<Matrix>& units, double lambda, const MergeParams& inner) {
  return merge_knots(units, iota_vec(units.size()), lambda, inner, nullptr);
}

CoreBases corespace_bases(const std::vector<Matrix>& bs, const std::vector<Matrix>& as) {
  if (bs.empty() || bs.size() != as.size()) fail(ErrorCode::invalid_argument, "CoreSpace needs matching B and A factors");
  for (std::size_t t = 0; t < bs.size(); ++t) {
    if (bs[t].rows() != bs[0].rows() || as[t].cols() != as[0].cols() || bs[t].cols() != as[t].rows()) {
      fail(ErrorCode::shape, "CoreSpace factor shapes disagree for unit " + std::to_string(t));
    }
  }
  const auto db = linalg::svd(hcat(bs));
  const auto da = linalg::svd(vcat(as));
  return {db.u.leftCols(linalg::numerical_rank(db.s)), da.v.leftCols(linalg::numerical_rank(da.s))};
}

Matrix merge_corespace(const std::vector<Matrix>& bs, const std::vector<Matrix>& as,
                       const std::vector<std::size_t>& merge_units, double lambda, const MergeParams& inner,
                       const std::vector<std::size_t>* task_ids) {
  const auto bases = corespace_bases(bs, as);
  if (merge_units.empty()) return Matrix::Zero(bs[0].rows(), as[0].cols());
  std::vector<Matrix> cores;
  std::vector<int> ranks;
  for (auto t : merge_units) {
    cores.push_back(bases.u_b.transpose() * bs.at(t) * (as.at(t) * bases.v_a));
    ranks.push_back(static_cast<int>(as.at(t).rows()));
  }
  const auto ids = task_ids ? *task_ids : merge_units;
  Matrix out = bases.u_b * inner_merge(cores, ids, ranks, inner) * bases.v_a.transpose();
  out *= lambda;
  return out;
}

Matrix merge_corespace(const std::vector<Matrix>& bs, const std::vector<Matrix>& as,
                       const std::vector<std::size_t>& merge_units, double lambda, const MergeParams& inner) {
  return merge_corespace(bs, as, merge_units, lambda, inner, nullptr);
}

Matrix merge_corespace(const std::vector<Matrix>& bs, const std::vector<Matrix>& as, double lambda,
                       const MergeParams& inner) {
  return merge_corespace(bs, as, iota_vec(bs.size()), lambda, inner, nullptr);
}

// ---------------------------------------------------------------------------
// Masked merge over the grid

std::vector<std::size_t> retained_set(const ModuleGrid& grid, const PruningMask& mask, std::size_t layer) {
  if (mask.num_layers != grid.num_layers() || mask.num_tasks != grid.num_tasks()) {
    fail(ErrorCode::shape, "mask is " + std::to_string(mask.num_layers) + "x" + std::to_string(mask.num_tasks) +
                               " but the grid is " + std::to_string(grid.num_layers()) + "x" +
                               std::to_string(grid.num_tasks()));
  }
  if (layer >= grid.num_layers()) fail(ErrorCode::invalid_argument, "layer out of range");
  std::vector<std::size_t> kept;
  for (std::size_t t = 0; t < grid.num_tasks(); ++t) {
    if (!mask.at(layer, t)) kept.push_back(t);
  }
  return kept;
}

MergedDelta merge_with_mask(const ModuleGrid& grid, const PruningMask& mask, const MergeParams& params) {
  params.validate();
  const std::size_t num_tasks = grid.num_tasks();
  MergedDelta out;
  out.layers.resize(grid.num_layers());
  for (std::size_t l = 0; l < grid.num_layers(); ++l) {
    const auto kept = retained_set(grid, mask, l);
    for (Projection p : kProjections) {
      const auto rows = grid.rows(l, p);
      const auto cols = grid.cols(l, p);
      Matrix& dst = out.at(l, p);
      if (kept.empty()) {
        dst = Matrix::Zero(rows, cols);
        continue;
      }
      // Distinct DARE masks per (layer, projection) under one user seed.
      MergeParams local = params;
      local.seed = splitmix64(params.seed ^ splitmix64(l * kNumProjections + static_cast<std::size_t>(p)));

      std::vector<Matrix> deltas, bs, as;
      std::vector<int> ranks;
      for (auto t : kept) {
        deltas.push_back(grid.delta(l, t, p));
        ranks.push_back(grid.rank(t));
      }
      switch (params.method) {
        case MergeMethod::ta: dst = merge_ta(deltas, params.lambda); break;
        case MergeMethod::ties: dst = merge_ties(deltas, params.lambda, params.density); break;
        case MergeMethod::dare:
          dst = merge_dare(deltas, kept, params.lambda, params.density, params.drop_rate, local.seed, params.dare_sum);
          break;
        case MergeMethod::tsv: dst = merge_tsv(deltas, params.lambda, ranks); break;
        case MergeMethod::knots: {
          if (params.order == MergeOrder::prune_then_align) {
            dst = merge_knots(deltas, iota_vec(kept.size()), params.lambda, local, &kept);
          } else {
            std::vector<Matrix> all;
            for (std::size_t t = 0; t < num_tasks; ++t) all.push_back(grid.delta(l, t, p));
            dst = merge_knots(all, kept, params.lambda, local, &kept);
          }
          break;
        }
        case MergeMethod::corespace: {
          const auto basis_tasks = params.order == MergeOrder::prune_then_align ? kept : iota_vec(num_tasks);
          for (auto t : basis_tasks) {
            bs.push_back(grid.scaled_b(l, t, p));
            as.push_back(grid.a(l, t, p));
          }
          const auto merge_units =
              params.order == MergeOrder::prune_then_align ? iota_vec(kept.size()) : kept;
          dst = merge_corespace(bs, as, merge_units, params.lambda, local, &kept);
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace negmerge
