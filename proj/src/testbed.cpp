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

#include "testbed.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "linalg.hpp"
#include "merge_engine.hpp"
#include "random.hpp"
#include "safetensors.hpp"

namespace negmerge {

using nlohmann::json;

namespace {

// Storage is f32, so generated data is rounded once up front and the
// in-memory bed matches its export exactly.
Matrix gaussian_f32(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<float>(scale * rng.normal());
  }
  return m;
}

std::int64_t first_argmax(const Eigen::Ref<const Vector>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct Layout {
  Eigen::Index dx, classes;
  Eigen::Index in_pos() const { return 0; }
  Eigen::Index in_neg() const { return dx; }
  Eigen::Index ch_pos(std::size_t t) const { return 2 * dx + 2 * classes * static_cast<Eigen::Index>(t); }
  Eigen::Index ch_neg(std::size_t t) const { return ch_pos(t) + classes; }
};

// Adds share * [[M, -M], [-M, M]] onto the (channel t, input) blocks.
void write_channel(Matrix& delta, const Layout& lay, std::size_t t, const Matrix& m, double share) {
  const Matrix s = share * m;
  delta.block(lay.ch_pos(t), lay.in_pos(), lay.classes, lay.dx) += s;
  delta.block(lay.ch_pos(t), lay.in_neg(), lay.classes, lay.dx) -= s;
  delta.block(lay.ch_neg(t), lay.in_pos(), lay.classes, lay.dx) -= s;
  delta.block(lay.ch_neg(t), lay.in_neg(), lay.classes, lay.dx) += s;
}

LoraFactors factorize(const Matrix& delta, int rank) {
  const auto d = linalg::svd(delta);
  LoraFactors f;
  f.b = Matrix::Zero(delta.rows(), rank);
  f.a = Matrix::Zero(rank, delta.cols());
  const auto k = std::min<Eigen::Index>(rank, linalg::numerical_rank(d.s));
  f.b.leftCols(k) = d.u.leftCols(k) * d.s.head(k).asDiagonal();
  f.a.topRows(k) = d.v.leftCols(k).transpose();
  // Round to storage precision so the in-memory bed equals its export.
  f.b = round_to_f32(std::move(f.b));
  f.a = round_to_f32(std::move(f.a));
  return f;
}

std::string task_name(std::size_t t) { return "task" + std::to_string(t); }

double bed_fitness(const SyntheticTestbed& bed, const ModuleGrid& grid, const PruningMask& mask) {
  MergeParams ta;
  return fitness(eval_builtin(merge_with_mask(grid, mask, ta), bed), bed.experts);
}

}  // namespace

void TestbedSpec::validate() const {
  if (num_layers < 1 || num_tasks < 1) fail(ErrorCode::config, "testbed needs at least one layer and one task");
  if (num_classes < 2) fail(ErrorCode::config, "testbed needs at least two classes");
  if (samples < 1) fail(ErrorCode::config, "testbed needs at least one sample per task");
  if (input_dim < num_layers) {
    fail(ErrorCode::config, "input_dim " + std::to_string(input_dim) + " is too small to split each teacher over " +
                                std::to_string(num_layers) + " layers");
  }
  if (num_negatives >= num_layers * num_tasks) fail(ErrorCode::config, "num_negatives must be below L*T");
  if (num_negatives > 0 && num_tasks < 2) fail(ErrorCode::config, "negatives need a second task to target");
  if (num_negatives > num_tasks * (num_layers - 1)) {
    fail(ErrorCode::config, "num_negatives leaves some task without a constructive unit");
  }
  if (coupled && (num_tasks < 2 || num_layers < 2)) fail(ErrorCode::config, "coupled mode needs L >= 2 and T >= 2");
  if (coupled && num_negatives > 0) fail(ErrorCode::config, "coupled mode does not plant negatives");
  if (!(negative_scale > 0) || !(crosstalk >= 0) || !(coupling > 0)) {
    fail(ErrorCode::config, "testbed scales must be positive");
  }
}

json TestbedSpec::to_json() const {
  return {{"num_layers", num_layers},         {"num_tasks", num_tasks}, {"input_dim", input_dim},
          {"num_classes", num_classes},       {"samples", samples},     {"num_negatives", num_negatives},
          {"seed", seed},                     {"coupled", coupled},     {"negative_scale", negative_scale},
          {"crosstalk", crosstalk},           {"coupling", coupling}};
}

TestbedSpec TestbedSpec::from_json(const json& j) {
  static const std::set<std::string> known = {"num_layers", "num_tasks",      "input_dim", "num_classes",
                                              "samples",    "num_negatives",  "seed",      "coupled",
                                              "negative_scale", "crosstalk", "coupling"};
  if (!j.is_object()) fail(ErrorCode::config, "testbed spec must be an object");
  for (auto& [k, v] : j.items()) {
    if (!known.count(k)) fail(ErrorCode::config, "unknown key testbed." + k);
  }
  TestbedSpec s;
  try {
    s.num_layers = j.value("num_layers", s.num_layers);
    s.num_tasks = j.value("num_tasks", s.num_tasks);
    s.input_dim = j.value("input_dim", s.input_dim);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.samples = j.value("samples", s.samples);
    s.seed = j.value("seed", s.seed);
    s.coupled = j.value("coupled", false);
    // Coupled beds carry no planted negatives unless asked to.
    s.num_negatives = j.value("num_negatives", s.coupled ? std::size_t{0} : s.num_negatives);
    s.negative_scale = j.value("negative_scale", s.negative_scale);
    s.crosstalk = j.value("crosstalk", s.crosstalk);
    s.coupling = j.value("coupling", s.coupling);
  } catch (const json::exception& e) {
    fail(ErrorCode::config, std::string("testbed spec: ") + e.what());
  }
  return s;
}

SyntheticTestbed make_testbed(const TestbedSpec& spec) {
  spec.validate();
  const std::size_t L = spec.num_layers, T = spec.num_tasks, N = L * T;
  const auto dx = static_cast<Eigen::Index>(spec.input_dim);
  const auto C = static_cast<Eigen::Index>(spec.num_classes);
  const Layout lay{dx, C};

  SyntheticTestbed bed;
  bed.spec = spec;
  bed.hidden_dim = static_cast<std::size_t>(2 * dx + 2 * C * static_cast<Eigen::Index>(T));
  const auto d = static_cast<Eigen::Index>(bed.hidden_dim);
  for (std::size_t t = 0; t < T; ++t) bed.tasks.push_back(task_name(t));

  Rng rng(spec.seed);
  std::vector<Matrix> teachers;
  for (std::size_t t = 0; t < T; ++t) teachers.push_back(gaussian_f32(rng, C, dx));
  for (std::size_t t = 0; t < T; ++t) {
    bed.features.push_back(gaussian_f32(rng, static_cast<Eigen::Index>(spec.samples), dx));
    const Matrix logits = bed.features[t] * teachers[t].transpose();
    std::vector<std::int64_t> y(spec.samples);
    for (std::size_t i = 0; i < spec.samples; ++i) y[i] = first_argmax(logits.row(static_cast<Eigen::Index>(i)).transpose());
    bed.labels.push_back(std::move(y));
  }

  // Planted negatives: every task keeps at least one constructive unit.
  bed.planted.assign(N, 0);
  if (spec.num_negatives > 0) {
    while (true) {
      std::vector<std::size_t> pool(N);
      std::iota(pool.begin(), pool.end(), 0);
      FlatMask pick(N, 0);
      for (std::size_t i = 0; i < spec.num_negatives; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(N - i));
        std::swap(pool[i], pool[j]);
        pick[pool[i]] = 1;
      }
      bool ok = true;
      for (std::size_t t = 0; t < T && ok; ++t) {
        std::size_t kept = 0;
        for (std::size_t l = 0; l < L; ++l) kept += !pick[l * T + t];
        ok = kept > 0;
      }
      if (ok) {
        bed.planted = pick;
        break;
      }
    }
  }

  // contrib[u][t]: what unit u writes into task t's channel (C x dx).
  std::vector<std::vector<Matrix>> contrib(N, std::vector<Matrix>(T, Matrix::Zero(C, dx)));
  const double leak = spec.crosstalk / std::sqrt(static_cast<double>(dx));
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::size_t> cons;
    const bool coupled_task = spec.coupled && t == 0;
    if (coupled_task) {
      cons = {0, 1};
    } else {
      for (std::size_t l = 0; l < L; ++l) {
        if (!bed.planted[l * T + t]) cons.push_back(l);
      }
    }
    for (std::size_t k = 0; k < cons.size(); ++k) {
      const std::size_t u = cons[k] * T + t;
      if (coupled_task) {
        contrib[u][t] = teachers[t];
      } else {
        // Column chunk k of an even split of dx columns over cons.size() units.
        const auto n = static_cast<Eigen::Index>(cons.size());
        const auto base = dx / n, extra = dx % n;
        const auto kk = static_cast<Eigen::Index>(k);
        const auto begin = kk * base + std::min(kk, extra);
        const auto width = base + (kk < extra ? 1 : 0);
        contrib[u][t].middleCols(begin, width) = teachers[t].middleCols(begin, width);
      }
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        if (t2 != t) contrib[u][t2] = gaussian_f32(rng, C, dx, leak);
      }
      if (coupled_task) {
        contrib[u][1] -= spec.coupling * teachers[1];
        bed.coupled_units.push_back(u);
      }
    }
  }
  std::vector<std::size_t> hits(T, 0);
  for (std::size_t u = 0; u < N; ++u) {
    if (!bed.planted[u]) continue;
    const std::size_t t = u % T;
    std::size_t target = T;
    for (std::size_t x = 0; x < T; ++x) {
      if (x == t) continue;
      if (target == T || hits[x] < hits[target] ||
          (hits[x] == hits[target] && (x + T - t) % T < (target + T - t) % T)) {
        target = x;
      }
    }
    ++hits[target];
    contrib[u][target] = -spec.negative_scale * teachers[target];
  }

  // Own-channel signal rides on q and v, everything else on k and o.
  const int rank = static_cast<int>(std::min<Eigen::Index>(C * static_cast<Eigen::Index>(T), dx));
  for (std::size_t t = 0; t < T; ++t) {
    AdapterCheckpoint ckpt;
    ckpt.task_name = bed.tasks[t];
    ckpt.rank = rank;
    ckpt.alpha = rank;
    ckpt.layers.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t u = l * T + t;
      std::array<Matrix, kNumProjections> deltas;
      for (auto& m : deltas) m = Matrix::Zero(d, d);
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        const bool own = t2 == t;
        write_channel(deltas[static_cast<std::size_t>(own ? Projection::q : Projection::k)], lay, t2, contrib[u][t2], 0.5);
        write_channel(deltas[static_cast<std::size_t>(own ? Projection::v : Projection::o)], lay, t2, contrib[u][t2], 0.5);
      }
      for (Projection p : kProjections) ckpt.layers[l][p] = factorize(deltas[static_cast<std::size_t>(p)], rank);
    }
    bed.adapters.push_back(std::move(ckpt));
  }

  bed.embed = Matrix::Zero(d, dx);
  bed.embed.block(lay.in_pos(), 0, dx, dx).setIdentity();
  bed.embed.block(lay.in_neg(), 0, dx, dx) = -Matrix::Identity(dx, dx);
  Matrix pass = Matrix::Zero(d, d);
  auto pass_block = [&](Eigen::Index pos, Eigen::Index neg, Eigen::Index w) {
    const Matrix i = 0.25 * Matrix::Identity(w, w);
    pass.block(pos, pos, w, w) += i;
    pass.block(pos, neg, w, w) -= i;
    pass.block(neg, pos, w, w) -= i;
    pass.block(neg, neg, w, w) += i;
  };
  pass_block(lay.in_pos(), lay.in_neg(), dx);
  for (std::size_t t = 0; t < T; ++t) pass_block(lay.ch_pos(t), lay.ch_neg(t), C);
  bed.backbone.resize(L);
  for (auto& layer : bed.backbone) layer.fill(pass);
  for (std::size_t t = 0; t < T; ++t) {
    Matrix h = Matrix::Zero(C, d);
    h.block(0, lay.ch_pos(t), C, C).setIdentity();
    h.block(0, lay.ch_neg(t), C, C) = -Matrix::Identity(C, C);
    bed.heads.push_back(h);
  }

  // Experts: each task's own units alone.
  const auto grid = ModuleGrid::build(bed.adapters);
  bed.experts.source = ExpertScores::Source::measured;
  for (std::size_t t = 0; t < T; ++t) {
    auto mask = PruningMask::zeros(L, T);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t t2 = 0; t2 < T; ++t2) mask.bits[l * T + t2] = t2 != t;
    }
    const auto acc = eval_builtin(merge_with_mask(grid, mask, MergeParams{}), bed);
    bed.experts.accuracy[bed.tasks[t]] = acc.at(bed.tasks[t]);
  }
  for (const auto& [task, acc] : bed.experts.accuracy) {
    if (acc <= 0.0) fail(ErrorCode::internal, "testbed expert for " + task + " scores zero");
  }

  if (spec.num_negatives > 0) {
    const double base = bed_fitness(bed, grid, PruningMask::zeros(L, T));
    const double pruned = bed_fitness(bed, grid, reshape_mask(bed.planted, L, T));
    if (!(pruned > base)) {
      fail(ErrorCode::config, "testbed seed " + std::to_string(spec.seed) +
                                  " is unsound: pruning the planted units does not beat the full merge");
    }
  }
  return bed;
}

TaskAccuracy eval_builtin(const MergedDelta& delta, const SyntheticTestbed& bed, std::optional<std::size_t> subsample,
                          std::uint64_t stream) {
  const std::size_t L = bed.spec.num_layers;
  const auto d = static_cast<Eigen::Index>(bed.hidden_dim);
  if (delta.layers.size() != L) {
    fail(ErrorCode::shape, "merged delta has " + std::to_string(delta.layers.size()) + " layers, testbed has " +
                               std::to_string(L));
  }
  std::vector<Matrix> weights(L);
  for (std::size_t l = 0; l < L; ++l) {
    weights[l] = Matrix::Zero(d, d);
    for (Projection p : kProjections) {
      const auto& m = delta.at(l, p);
      if (m.rows() != d || m.cols() != d) {
        fail(ErrorCode::shape, "merged delta layer " + std::to_string(l) + " " + std::string(projection_name(p)) +
                                   " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                   ", expected " + std::to_string(d) + "x" + std::to_string(d));
      }
      weights[l] += bed.backbone[l][static_cast<std::size_t>(p)] + m;
    }
  }

  TaskAccuracy out;
  for (std::size_t t = 0; t < bed.tasks.size(); ++t) {
    const auto& x = bed.features[t];
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (subsample && *subsample < n) {
      Rng rng(derive_stream(stream, t, 0x5u));
      for (std::size_t i = 0; i < *subsample; ++i) {
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
      }
      idx.resize(*subsample);
      std::sort(idx.begin(), idx.end());
    }
    Matrix xs(x.cols(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) xs.col(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i])).transpose();
    Matrix h = (bed.embed * xs).cwiseMax(0.0);
    for (std::size_t l = 0; l < L; ++l) h = (weights[l] * h).cwiseMax(0.0);
    const Matrix logits = bed.heads[t] * h;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      correct += first_argmax(logits.col(static_cast<Eigen::Index>(i))) == bed.labels[t][idx[i]];
    }
    out[bed.tasks[t]] = idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export / import

void export_testbed(const SyntheticTestbed& bed, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "adapters", ec);
  if (ec) fail(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());

  safetensors::File backbone;
  backbone.tensors["embed"] = safetensors::Tensor::from_matrix_f32(bed.embed);
  for (std::size_t l = 0; l < bed.backbone.size(); ++l) {
    for (Projection p : kProjections) {
      backbone.tensors["layers." + std::to_string(l) + "." + std::string(projection_name(p)) + ".weight"] =
          safetensors::Tensor::from_matrix_f32(bed.backbone[l][static_cast<std::size_t>(p)]);
    }
  }
  safetensors::File eval;
  json adapters = json::object();
  for (std::size_t t = 0; t < bed.tasks.size(); ++t) {
    const auto& name = bed.tasks[t];
    backbone.tensors["heads." + name] = safetensors::Tensor::from_matrix_f32(bed.heads[t]);
    eval.tensors[name + ".x"] = safetensors::Tensor::from_matrix_f32(bed.features[t]);
    eval.tensors[name + ".y"] = safetensors::Tensor::from_i64(bed.labels[t]);
    const auto rel = fs::path("adapters") / name / "adapter.safetensors";
    fs::create_directories(dir / rel.parent_path(), ec);
    if (ec) fail(ErrorCode::io, "cannot create " + (dir / rel.parent_path()).string());
    save_adapter(dir / rel, bed.adapters[t]);
    adapters[name] = rel.generic_string();
  }
  safetensors::write(dir / "backbone.safetensors", backbone);
  safetensors::write(dir / "eval.safetensors", eval);

  std::vector<std::size_t> planted;
  for (std::size_t u = 0; u < bed.planted.size(); ++u) {
    if (bed.planted[u]) planted.push_back(u);
  }
  json meta = {
      {"format", "negmerge-testbed"},
      {"version", 1},
      {"spec", bed.spec.to_json()},
      {"tasks", bed.tasks},
      {"num_layers", bed.spec.num_layers},
      {"input_dim", bed.spec.input_dim},
      {"hidden_dim", bed.hidden_dim},
      {"num_classes", bed.spec.num_classes},
      {"samples", bed.spec.samples},
      {"projections", {"q", "k", "v", "o"}},
      {"activation", "relu"},
      {"forward",
       "h = relu(embed @ x); for each layer l: h = relu(sum_p (backbone[l][p] + delta[l][p]) @ h); "
       "logits = heads[task] @ h; prediction = first index of the maximum logit"},
      {"tensors",
       {{"embed", "embed"},
        {"backbone", "layers.{l}.{proj}.weight"},
        {"heads", "heads.{task}"},
        {"features", "{task}.x"},
        {"labels", "{task}.y"},
        {"delta", "layers.{l}.{proj}.delta"}}},
      {"files", {{"backbone", "backbone.safetensors"}, {"eval", "eval.safetensors"}, {"adapters", adapters}}},
      {"expert_accuracy", bed.experts.accuracy},
      {"planted_negatives", planted},
      {"coupled_units", bed.coupled_units},
  };
  std::ofstream out(dir / "testbed.json");
  if (!out) fail(ErrorCode::io, "cannot write " + (dir / "testbed.json").string());
  out << meta.dump(2) << '\n';
}

SyntheticTestbed import_testbed(const std::filesystem::path& dir) {
  std::ifstream in(dir / "testbed.json");
  if (!in) fail(ErrorCode::io, "cannot open " + (dir / "testbed.json").string());
  json meta = json::parse(in, nullptr, false);
  if (meta.is_discarded() || meta.value("format", "") != "negmerge-testbed") {
    fail(ErrorCode::schema, (dir / "testbed.json").string() + " is not a testbed description");
  }
  SyntheticTestbed bed;
  try {
    bed.spec = TestbedSpec::from_json(meta.at("spec"));
    bed.hidden_dim = meta.at("hidden_dim").get<std::size_t>();
    bed.tasks = meta.at("tasks").get<std::vector<std::string>>();
    const auto files = meta.at("files");
    const auto backbone = safetensors::read(dir / files.at("backbone").get<std::string>());
    const auto eval = safetensors::read(dir / files.at("eval").get<std::string>());
    bed.embed = backbone.at("embed").to_matrix();
    bed.backbone.resize(bed.spec.num_layers);
    for (std::size_t l = 0; l < bed.spec.num_layers; ++l) {
      for (Projection p : kProjections) {
        bed.backbone[l][static_cast<std::size_t>(p)] =
            backbone.at("layers." + std::to_string(l) + "." + std::string(projection_name(p)) + ".weight").to_matrix();
      }
    }
    for (const auto& name : bed.tasks) {
      bed.heads.push_back(backbone.at("heads." + name).to_matrix());
      bed.features.push_back(eval.at(name + ".x").to_matrix());
      bed.labels.push_back(eval.at(name + ".y").to_i64());
      bed.adapters.push_back(load_adapter(dir / files.at("adapters").at(name).get<std::string>()));
    }
    bed.planted.assign(bed.num_units(), 0);
    for (auto u : meta.at("planted_negatives").get<std::vector<std::size_t>>()) bed.planted.at(u) = 1;
    bed.coupled_units = meta.at("coupled_units").get<std::vector<std::size_t>>();
    bed.experts.accuracy = meta.at("expert_accuracy").get<TaskAccuracy>();
    bed.experts.source = ExpertScores::Source::measured;
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, (dir / "testbed.json").string() + ": " + e.what());
  }
  return bed;
}

}  // namespace negmerge
