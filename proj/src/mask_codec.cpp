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

#include "mask_codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace negmerge {

using nlohmann::json;

PruningMask PruningMask::zeros(std::size_t num_layers, std::size_t num_tasks) {
  return {num_layers, num_tasks, FlatMask(num_layers * num_tasks, 0)};
}

std::size_t PruningMask::popcount() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::size_t prune_budget(std::size_t n, double k) {
  return static_cast<std::size_t>(std::floor(k * static_cast<double>(n) + 1e-9));
}

FlatMask map_latent(const Vector& z, double k) {
  if (!(k >= 0.0 && k < 1.0)) fail(ErrorCode::invalid_argument, "max prune ratio k must lie in [0, 1)");
  const auto n = static_cast<std::size_t>(z.size());
  const std::size_t budget = prune_budget(n, k);
  FlatMask mask(n, 0);
  if (budget == 0) return mask;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (z[a] != z[b]) return z[a] > z[b];
                      return a < b;
                    });
  for (std::size_t i = 0; i < budget; ++i) {
    if (z[order[i]] > 0.0) mask[order[i]] = 1;
  }
  return mask;
}

PruningMask reshape_mask(const FlatMask& flat, std::size_t num_layers, std::size_t num_tasks) {
  if (flat.size() != num_layers * num_tasks) {
    fail(ErrorCode::shape, "flat mask has " + std::to_string(flat.size()) + " entries, expected " +
                               std::to_string(num_layers) + "x" + std::to_string(num_tasks));
  }
  for (auto b : flat) {
    if (b > 1) fail(ErrorCode::invalid_argument, "mask entries must be 0 or 1");
  }
  return {num_layers, num_tasks, flat};
}

json mask_to_json(const PruningMask& mask, const std::vector<std::string>& tasks) {
  json rows = json::array();
  for (std::size_t l = 0; l < mask.num_layers; ++l) {
    std::string row;
    for (std::size_t t = 0; t < mask.num_tasks; ++t) row.push_back(mask.at(l, t) ? '1' : '0');
    rows.push_back(row);
  }
  return {{"L", mask.num_layers}, {"T", mask.num_tasks}, {"tasks", tasks}, {"rows", rows}};
}

PruningMask mask_from_json(const json& j) {
  try {
    const auto num_layers = j.at("L").get<std::size_t>();
    const auto num_tasks = j.at("T").get<std::size_t>();
    const auto& rows = j.at("rows");
    if (!rows.is_array() || rows.size() != num_layers) {
      fail(ErrorCode::schema, "mask declares L=" + std::to_string(num_layers) + " but has " +
                                  std::to_string(rows.size()) + " rows");
    }
    if (j.contains("tasks") && j.at("tasks").size() != num_tasks) {
      fail(ErrorCode::schema, "mask declares T=" + std::to_string(num_tasks) + " but lists " +
                                  std::to_string(j.at("tasks").size()) + " tasks");
    }
    auto mask = PruningMask::zeros(num_layers, num_tasks);
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto row = rows[l].get<std::string>();
      if (row.size() != num_tasks) {
        fail(ErrorCode::schema, "mask row " + std::to_string(l) + " has length " + std::to_string(row.size()) +
                                    ", expected T=" + std::to_string(num_tasks));
      }
      for (std::size_t t = 0; t < num_tasks; ++t) {
        if (row[t] != '0' && row[t] != '1') {
          fail(ErrorCode::schema, "mask row " + std::to_string(l) + " contains '" + row[t] + "'");
        }
        mask.bits[l * num_tasks + t] = row[t] == '1';
      }
    }
    return mask;
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, std::string("malformed mask: ") + e.what());
  }
}

void write_mask(const std::filesystem::path& path, const PruningMask& mask,
                const std::vector<std::string>& tasks) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << mask_to_json(mask, tasks).dump(2) << '\n';
}

PruningMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::schema, path.string() + ": malformed JSON");
  return mask_from_json(j);
}

}  // namespace negmerge
