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

// LoRA checkpoints, the layer x task grid of prunable units, and merged-delta
// files.

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace negmerge {

struct LoraFactors {
  Matrix a;  // r x d_in
  Matrix b;  // d_out x r
};

struct LayerAdapter {
  std::array<LoraFactors, kNumProjections> proj;

  const LoraFactors& operator[](Projection p) const { return proj[static_cast<std::size_t>(p)]; }
  LoraFactors& operator[](Projection p) { return proj[static_cast<std::size_t>(p)]; }
};

struct AdapterCheckpoint {
  std::string task_name;
  std::vector<LayerAdapter> layers;
  int rank = 0;
  double alpha = 0.0;

  std::size_t num_layers() const { return layers.size(); }
  double scale() const { return alpha / rank; }
};

/// Maps on-disk tensor names to (layer, projection, factor). The canonical
/// convention is `layers.{l}.{proj}.lora_{A|B}`; foreign conventions are
/// described by a regex with three capture groups and a projection alias table.
class NamingScheme {
 public:
  struct Key {
    std::size_t layer;
    Projection proj;
    char factor;  // 'A' or 'B'
  };

  static NamingScheme canonical();
  // HuggingFace PEFT layout, e.g.
  // base_model.model.model.layers.3.self_attn.q_proj.lora_A.weight
  static NamingScheme peft();
  // {"preset": "canonical"|"peft"} or
  // {"pattern": "...", "layer_group": 1, "proj_group": 2, "factor_group": 3,
  //  "proj_alias": {"q_proj": "q", ...}}
  static NamingScheme from_json(const nlohmann::json& j);

  std::optional<Key> match(const std::string& tensor_name) const;
  std::string canonical_name(std::size_t layer, Projection p, char factor) const;

 private:
  std::string pattern_text_;
  std::regex pattern_;
  int layer_group_ = 1;
  int proj_group_ = 2;
  int factor_group_ = 3;
  std::map<std::string, Projection> proj_alias_;
};

AdapterCheckpoint load_adapter(const std::filesystem::path& path,
                               const NamingScheme& naming = NamingScheme::canonical());

// Writes the canonical tensor layout plus a sibling meta.json.
void save_adapter(const std::filesystem::path& path, const AdapterCheckpoint& ckpt);

Matrix delta_matrix(const AdapterCheckpoint& ckpt, std::size_t layer, Projection p);

/// L x T grid of pruning units. Unit j = l * T + t owns the four projection
/// adapters of task t at layer l. Immutable once built.
class ModuleGrid {
 public:
  static ModuleGrid build(const std::vector<AdapterCheckpoint>& ckpts);

  std::size_t num_layers() const { return num_layers_; }
  std::size_t num_tasks() const { return tasks_.size(); }
  std::size_t num_units() const { return num_layers_ * tasks_.size(); }
  const std::vector<std::string>& tasks() const { return tasks_; }
  int rank(std::size_t task) const { return ranks_[task]; }
  int max_rank() const;

  const Matrix& delta(std::size_t layer, std::size_t task, Projection p) const;
  // (alpha / r) * B, so that delta == scaled_b * a.
  const Matrix& scaled_b(std::size_t layer, std::size_t task, Projection p) const;
  const Matrix& a(std::size_t layer, std::size_t task, Projection p) const;

  Eigen::Index rows(std::size_t layer, Projection p) const;
  Eigen::Index cols(std::size_t layer, Projection p) const;

  std::size_t flatten(std::size_t layer, std::size_t task) const { return layer * tasks_.size() + task; }
  std::pair<std::size_t, std::size_t> unflatten(std::size_t unit) const {
    return {unit / tasks_.size(), unit % tasks_.size()};
  }

 private:
  struct Cell {
    std::array<Matrix, kNumProjections> delta;
    std::array<Matrix, kNumProjections> scaled_b;
    std::array<Matrix, kNumProjections> a;
  };
  const Cell& cell(std::size_t layer, std::size_t task) const;

  std::size_t num_layers_ = 0;
  std::vector<std::string> tasks_;
  std::vector<int> ranks_;
  std::vector<Cell> cells_;
};

/// Merged update per layer and projection (the backbone is added by the consumer).
struct MergedDelta {
  std::vector<std::array<Matrix, kNumProjections>> layers;

  const Matrix& at(std::size_t layer, Projection p) const {
    return layers[layer][static_cast<std::size_t>(p)];
  }
  Matrix& at(std::size_t layer, Projection p) { return layers[layer][static_cast<std::size_t>(p)]; }
};

// Tensors are named `layers.{l}.{proj}.delta`; the manifest is embedded in the
// header metadata under "merge.json".
void save_delta(const std::filesystem::path& path, const MergedDelta& delta,
                const nlohmann::json& manifest);

struct LoadedDelta {
  MergedDelta delta;
  nlohmann::json manifest;
};
LoadedDelta load_delta(const std::filesystem::path& path);

}  // namespace negmerge
