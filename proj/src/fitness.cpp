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

#include "fitness.hpp"

namespace negmerge {

double normalized_accuracy(double merged, double expert) {
  if (!(expert > 0.0)) fail(ErrorCode::invalid_argument, "expert accuracy must be positive");
  return merged / expert;
}

double fitness(const TaskAccuracy& merged, const ExpertScores& experts) {
  if (experts.accuracy.empty()) fail(ErrorCode::invalid_argument, "no expert scores");
  double sum = 0.0;
  for (const auto& [task, expert] : experts.accuracy) {
    auto it = merged.find(task);
    if (it == merged.end()) fail(ErrorCode::evaluator, "no accuracy reported for task '" + task + "'");
    sum += normalized_accuracy(it->second, expert);
  }
  return sum / static_cast<double>(experts.accuracy.size());
}

}  // namespace negmerge
