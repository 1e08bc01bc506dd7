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

#include "adapter_store.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "safetensors.hpp"

namespace negmerge {

using nlohmann::json;

namespace {

std::string unit_label(std::size_t layer, Projection p, char factor) {
  std::ostringstream os;
  os << "layer " << layer << ", " << projection_name(p) << ", " << factor;
  return os.str();
}

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

// ---------------------------------------------------------------------------
// NamingScheme

NamingScheme NamingScheme::canonical() {
  NamingScheme s;
  s.pattern_text_ = R"(^layers\.(\d+)\.(q|k|v|o)\.lora_(A|B)$)";
  s.pattern_ = std::regex(s.pattern_text_);
  for (Projection p : kProjections) s.proj_alias_[std::string(projection_name(p))] = p;
  return s;
}

NamingScheme NamingScheme::peft() {
  NamingScheme s;
  s.pattern_text_ = R"(^(?:.*\.)?layers\.(\d+)\.(?:self_attn|attention)\.(q_proj|k_proj|v_proj|o_proj|out_proj)\.lora_(A|B)(?:\.default)?\.weight$)";
  s.pattern_ = std::regex(s.pattern_text_);
  s.proj_alias_ = {{"q_proj", Projection::q},
                   {"k_proj", Projection::k},
                   {"v_proj", Projection::v},
                   {"o_proj", Projection::o},
                   {"out_proj", Projection::o}};
  return s;
}

NamingScheme NamingScheme::from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::config, "naming must be an object");
  if (j.contains("preset")) {
    if (j.size() != 1) fail(ErrorCode::config, "naming.preset cannot be combined with other keys");
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "canonical") return canonical();
    if (preset == "peft") return peft();
    fail(ErrorCode::config, "unknown naming preset '" + preset + "'");
  }
  static const std::set<std::string> known = {"pattern", "layer_group", "proj_group", "factor_group",
                                              "proj_alias"};
  for (auto& [k, v] : j.items()) {
    if (!known.count(k)) fail(ErrorCode::config, "unknown key naming." + k);
  }
  NamingScheme s;
  try {
    s.pattern_text_ = j.at("pattern").get<std::string>();
    s.pattern_ = std::regex(s.pattern_text_);
  } catch (const std::regex_error& e) {
    fail(ErrorCode::config, std::string("naming.pattern is not a valid regex: ") + e.what());
  }
  s.layer_group_ = j.value("layer_group", 1);
  s.proj_group_ = j.value("proj_group", 2);
  s.factor_group_ = j.value("factor_group", 3);
  for (Projection p : kProjections) s.proj_alias_[std::string(projection_name(p))] = p;
  if (j.contains("proj_alias")) {
    for (auto& [alias, target] : j.at("proj_alias").items()) {
      auto p = parse_projection(target.get<std::string>());
      if (!p) fail(ErrorCode::config, "naming.proj_alias." + alias + " must map to q, k, v or o");
      s.proj_alias_[alias] = *p;
    }
  }
  return s;
}

std::optional<NamingScheme::Key> NamingScheme::match(const std::string& tensor_name) const {
  std::smatch m;
  if (!std::regex_match(tensor_name, m, pattern_)) return std::nullopt;
  const auto groups = static_cast<int>(m.size()) - 1;
  if (layer_group_ > groups || proj_group_ > groups || factor_group_ > groups) return std::nullopt;
  auto alias = proj_alias_.find(m[proj_group_].str());
  if (alias == proj_alias_.end()) return std::nullopt;
  const std::string factor = m[factor_group_].str();
  if (factor != "A" && factor != "B") return std::nullopt;
  return Key{static_cast<std::size_t>(std::stoull(m[layer_group_].str())), alias->second, factor[0]};
}

std::string NamingScheme::canonical_name(std::size_t layer, Projection p, char factor) const {
  return "layers." + std::to_string(layer) + "." + std::string(projection_name(p)) + ".lora_" + factor;
}

// ---------------------------------------------------------------------------
// Checkpoints

AdapterCheckpoint load_adapter(const std::filesystem::path& input, const NamingScheme& naming) {
  std::filesystem::path path = input;
  if (std::filesystem::is_directory(input)) {
    path.clear();
    for (const char* name : {"adapter.safetensors", "adapter_model.safetensors"}) {
      if (std::filesystem::exists(input / name)) {
        path = input / name;
        break;
      }
    }
    if (path.empty()) fail(ErrorCode::io, input.string() + " holds no adapter.safetensors or adapter_model.safetensors");
  }
  const auto file = safetensors::read(path);

  std::map<std::tuple<std::size_t, Projection, char>, Matrix> found;
  std::size_t num_layers = 0;
  for (const auto& [name, tensor] : file.tensors) {
    auto key = naming.match(name);
    if (!key) continue;
    found[{key->layer, key->proj, key->factor}] = tensor.to_matrix();
    num_layers = std::max(num_layers, key->layer + 1);
  }
  if (found.empty()) fail(ErrorCode::schema, path.string() + ": no LoRA tensors match the naming scheme");

  std::vector<std::string> missing;
  for (std::size_t l = 0; l < num_layers; ++l) {
    for (Projection p : kProjections) {
      for (char f : {'A', 'B'}) {
        if (!found.count({l, p, f})) missing.push_back(unit_label(l, p, f));
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = path.string() + ": missing tensors: ";
    for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? "; " : "") + missing[i];
    fail(ErrorCode::schema, msg);
  }

  AdapterCheckpoint ckpt;
  ckpt.layers.resize(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    for (Projection p : kProjections) {
      auto& f = ckpt.layers[l][p];
      f.a = std::move(found[{l, p, 'A'}]);
      f.b = std::move(found[{l, p, 'B'}]);
      if (f.a.rows() != f.b.cols()) {
        fail(ErrorCode::shape, path.string() + ": " + unit_label(l, p, 'A') + " is " + shape_str(f.a) +
                                   " but B is " + shape_str(f.b));
      }
      if (ckpt.rank == 0) ckpt.rank = static_cast<int>(f.a.rows());
      if (f.a.rows() != ckpt.rank) {
        fail(ErrorCode::shape, path.string() + ": " + unit_label(l, p, 'A') + " has rank " +
                                   std::to_string(f.a.rows()) + ", expected " + std::to_string(ckpt.rank));
      }
    }
  }
  if (ckpt.rank < 1) fail(ErrorCode::shape, path.string() + ": LoRA rank must be at least 1");

  ckpt.task_name = path == input ? path.stem().string() : input.filename().string();
  ckpt.alpha = ckpt.rank;
  const auto meta_path = path.parent_path() / "meta.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    json meta;
    try {
      meta = json::parse(in);
      if (meta.contains("task_name")) ckpt.task_name = meta.at("task_name").get<std::string>();
      if (meta.contains("rank") && meta.at("rank").get<int>() != ckpt.rank) {
        fail(ErrorCode::schema, meta_path.string() + ": rank " + meta.at("rank").dump() +
                                    " disagrees with tensor rank " + std::to_string(ckpt.rank));
      }
      if (meta.contains("alpha")) ckpt.alpha = meta.at("alpha").get<double>();
    } catch (const json::exception& e) {
      fail(ErrorCode::schema, meta_path.string() + ": " + e.what());
    }
    if (!(ckpt.alpha > 0)) fail(ErrorCode::schema, meta_path.string() + ": alpha must be positive");
  }
  return ckpt;
}

void save_adapter(const std::filesystem::path& path, const AdapterCheckpoint& ckpt) {
  const auto naming = NamingScheme::canonical();
  safetensors::File file;
  for (std::size_t l = 0; l < ckpt.num_layers(); ++l) {
    for (Projection p : kProjections) {
      file.tensors[naming.canonical_name(l, p, 'A')] = safetensors::Tensor::from_matrix_f32(ckpt.layers[l][p].a);
      file.tensors[naming.canonical_name(l, p, 'B')] = safetensors::Tensor::from_matrix_f32(ckpt.layers[l][p].b);
    }
  }
  safetensors::write(path, file);
  const json meta = {{"task_name", ckpt.task_name}, {"rank", ckpt.rank}, {"alpha", ckpt.alpha}};
  std::ofstream out(path.parent_path() / "meta.json");
  if (!out) fail(ErrorCode::io, "cannot write meta.json next to " + path.string());
  out << meta.dump(2) << '\n';
}

Matrix delta_matrix(const AdapterCheckpoint& ckpt, std::size_t layer, Projection p) {
  if (layer >= ckpt.num_layers()) {
    fail(ErrorCode::invalid_argument, "layer " + std::to_string(layer) + " out of range (L=" +
                                          std::to_string(ckpt.num_layers()) + ")");
  }
  const auto& f = ckpt.layers[layer][p];
  return ckpt.scale() * (f.b * f.a);
}

// ---------------------------------------------------------------------------
// ModuleGrid

ModuleGrid ModuleGrid::build(const std::vector<AdapterCheckpoint>& ckpts) {
  if (ckpts.empty()) fail(ErrorCode::invalid_argument, "a module grid needs at least one checkpoint");
  if (ckpts.size() < 2) warn("building a module grid from a single task");

  const auto& ref = ckpts.front();
  ModuleGrid grid;
  grid.num_layers_ = ref.num_layers();
  for (std::size_t t = 0; t < ckpts.size(); ++t) {
    const auto& c = ckpts[t];
    if (c.num_layers() != grid.num_layers_) {
      fail(ErrorCode::shape, "task '" + c.task_name + "' has " + std::to_string(c.num_layers()) +
                                 " layers, expected " + std::to_string(grid.num_layers_));
    }
    for (std::size_t l = 0; l < grid.num_layers_; ++l) {
      for (Projection p : kProjections) {
        const auto& a = c.layers[l][p];
        const auto& r = ref.layers[l][p];
        if (a.b.rows() != r.b.rows() || a.a.cols() != r.a.cols()) {
          fail(ErrorCode::shape, "task '" + c.task_name + "', layer " + std::to_string(l) + ", " +
                                     std::string(projection_name(p)) + ": delta shape " +
                                     std::to_string(a.b.rows()) + "x" + std::to_string(a.a.cols()) +
                                     " differs from " + std::to_string(r.b.rows()) + "x" +
                                     std::to_string(r.a.cols()));
        }
      }
    }
    grid.tasks_.push_back(c.task_name);
    grid.ranks_.push_back(c.rank);
  }

  grid.cells_.resize(grid.num_layers_ * ckpts.size());
  for (std::size_t l = 0; l < grid.num_layers_; ++l) {
    for (std::size_t t = 0; t < ckpts.size(); ++t) {
      auto& cell = grid.cells_[grid.flatten(l, t)];
      for (Projection p : kProjections) {
        const auto i = static_cast<std::size_t>(p);
        const auto& f = ckpts[t].layers[l][p];
        cell.scaled_b[i] = ckpts[t].scale() * f.b;
        cell.a[i] = f.a;
        cell.delta[i] = cell.scaled_b[i] * cell.a[i];
      }
    }
  }
  return grid;
}

int ModuleGrid::max_rank() const {
  int r = 0;
  for (int x : ranks_) r = std::max(r, x);
  return r;
}

const ModuleGrid::Cell& ModuleGrid::cell(std::size_t layer, std::size_t task) const {
  if (layer >= num_layers_ || task >= tasks_.size()) {
    fail(ErrorCode::invalid_argument, "unit (" + std::to_string(layer) + ", " + std::to_string(task) +
                                          ") outside a " + std::to_string(num_layers_) + "x" +
                                          std::to_string(tasks_.size()) + " grid");
  }
  return cells_[flatten(layer, task)];
}

const Matrix& ModuleGrid::delta(std::size_t layer, std::size_t task, Projection p) const {
  return cell(layer, task).delta[static_cast<std::size_t>(p)];
}

const Matrix& ModuleGrid::scaled_b(std::size_t layer, std::size_t task, Projection p) const {
  return cell(layer, task).scaled_b[static_cast<std::size_t>(p)];
}

const Matrix& ModuleGrid::a(std::size_t layer, std::size_t task, Projection p) const {
  return cell(layer, task).a[static_cast<std::size_t>(p)];
}

Eigen::Index ModuleGrid::rows(std::size_t layer, Projection p) const { return delta(layer, 0, p).rows(); }
Eigen::Index ModuleGrid::cols(std::size_t layer, Projection p) const { return delta(layer, 0, p).cols(); }

// ---------------------------------------------------------------------------
// Merged deltas

void save_delta(const std::filesystem::path& path, const MergedDelta& delta, const json& manifest) {
  if (!path.parent_path().empty() && !std::filesystem::is_directory(path.parent_path())) {
    fail(ErrorCode::io, "directory does not exist: " + path.parent_path().string());
  }
  safetensors::File file;
  for (std::size_t l = 0; l < delta.layers.size(); ++l) {
    for (Projection p : kProjections) {
      file.tensors["layers." + std::to_string(l) + "." + std::string(projection_name(p)) + ".delta"] =
          safetensors::Tensor::from_matrix_f32(delta.at(l, p));
    }
  }
  file.metadata["merge.json"] = manifest.dump();
  safetensors::write(path, file);
}

LoadedDelta load_delta(const std::filesystem::path& path) {
  const auto file = safetensors::read(path);
  LoadedDelta out;
  std::size_t num_layers = 0;
  for (const auto& [name, t] : file.tensors) {
    if (name.rfind("layers.", 0) != 0) continue;
    const auto dot = name.find('.', 7);
    if (dot == std::string::npos) continue;
    num_layers = std::max<std::size_t>(num_layers, std::stoull(name.substr(7, dot - 7)) + 1);
  }
  out.delta.layers.resize(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    for (Projection p : kProjections) {
      out.delta.at(l, p) =
          file.at("layers." + std::to_string(l) + "." + std::string(projection_name(p)) + ".delta").to_matrix();
    }
  }
  auto it = file.metadata.find("merge.json");
  out.manifest = it == file.metadata.end() ? json::object() : json::parse(it->second, nullptr, false);
  if (out.manifest.is_discarded()) fail(ErrorCode::schema, path.string() + ": unreadable merge manifest");
  return out;
}

}  // namespace negmerge
