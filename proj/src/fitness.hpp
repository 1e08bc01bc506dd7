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

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adapter_store.hpp"

namespace negmerge {

// Accuracy in [0, 1] keyed by task name.
using TaskAccuracy = std::map<std::string, double>;

struct ExpertScores {
  enum class Source { measured, supplied };
  TaskAccuracy accuracy;
  Source source = Source::supplied;
};

// merged / expert. May exceed 1.
double normalized_accuracy(double merged, double expert);

// Unweighted mean of normalized accuracies over the expert task set. Every
// expert task must be present in `merged`. NaN entries propagate.
double fitness(const TaskAccuracy& merged, const ExpertScores& experts);

/// Anything that can score a merged delta per task. `stream` seeds the
/// validation subsample for this call so repeated calls with the same stream
/// see the same items.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual TaskAccuracy evaluate(const MergedDelta& delta, std::uint64_t stream) = 0;
};

}  // namespace negmerge
