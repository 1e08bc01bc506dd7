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

// Latent-to-mask mapping and the on-disk mask format.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace negmerge {

using FlatMask = std::vector<std::uint8_t>;

/// Binary L x T matrix; 1 marks a pruned unit. Stored row-major over layers so
/// bits[l * T + t] is unit (l, t).
struct PruningMask {
  std::size_t num_layers = 0;
  std::size_t num_tasks = 0;
  FlatMask bits;

  static PruningMask zeros(std::size_t num_layers, std::size_t num_tasks);

  bool at(std::size_t layer, std::size_t task) const { return bits[layer * num_tasks + task] != 0; }
  std::size_t popcount() const;
  bool operator==(const PruningMask&) const = default;
};

// floor(k * N), tolerant of products such as 0.29 * 100 landing just below an
// integer.
std::size_t prune_budget(std::size_t n, double k);

// The N_prune largest entries of z (lower index wins ties) are pruned, but only
// where z_j > 0. Throws for k outside [0, 1).
FlatMask map_latent(const Vector& z, double k);

PruningMask reshape_mask(const FlatMask& flat, std::size_t num_layers, std::size_t num_tasks);
inline const FlatMask& flatten_mask(const PruningMask& m) { return m.bits; }

// {"L": .., "T": .., "tasks": [..], "rows": ["010", ...]}
nlohmann::json mask_to_json(const PruningMask& mask, const std::vector<std::string>& tasks);
PruningMask mask_from_json(const nlohmann::json& j);

void write_mask(const std::filesystem::path& path, const PruningMask& mask,
                const std::vector<std::string>& tasks);
PruningMask read_mask(const std::filesystem::path& path);

}  // namespace negmerge
