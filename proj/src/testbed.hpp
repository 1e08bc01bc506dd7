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

// Desk-scale multi-task model with planted negative units.
//
// Each task t is a linear teacher P_t (C x dx) on Gaussian inputs; the label is
// argmax(P_t x). The hidden state of width 2*dx + 2*C*T stores the input and
// one readout channel per task, each as a (positive, negative) ReLU pair, so a
// backbone made of "pass" blocks carries every value through any number of
// ReLU layers unchanged. A unit that writes M x into channel t has delta
// [[M, -M], [-M, M]] on the (channel, input) blocks. Constructive units of a
// task split the columns of P_t between them and leak small random crosstalk
// into the other channels; planted negatives write -beta * P_t' into another
// task's channel. With no delta every logit is zero and prediction falls to
// class 0, roughly chance.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "adapter_store.hpp"
#include "fitness.hpp"
#include "mask_codec.hpp"

namespace negmerge {

struct TestbedSpec {
  std::size_t num_layers = 3;
  std::size_t num_tasks = 3;
  std::size_t input_dim = 6;
  std::size_t num_classes = 3;
  std::size_t samples = 256;  // eval items per task
  std::size_t num_negatives = 3;
  std::uint64_t seed = 0;
  // Two units of task 0 (layers 0 and 1) each carry the full teacher plus
  // -coupling * P_1: either alone may go, both together destroy task 0.
  bool coupled = false;
  double negative_scale = 0.6;
  double crosstalk = 0.2;
  double coupling = 0.4;

  void validate() const;
  nlohmann::json to_json() const;
  static TestbedSpec from_json(const nlohmann::json& j);
};

struct SyntheticTestbed {
  TestbedSpec spec;
  std::size_t hidden_dim = 0;
  std::vector<std::string> tasks;
  Matrix embed;                                           // hidden x input
  std::vector<std::array<Matrix, kNumProjections>> backbone;  // per layer, hidden x hidden
  std::vector<Matrix> heads;                              // per task, C x hidden
  std::vector<Matrix> features;                           // per task, samples x input
  std::vector<std::vector<std::int64_t>> labels;          // per task
  std::vector<AdapterCheckpoint> adapters;                // per task
  FlatMask planted;                                       // ground-truth negatives
  std::vector<std::size_t> coupled_units;                 // flat indices, coupled mode only
  ExpertScores experts;                                   // measured at creation

  std::size_t num_units() const { return spec.num_layers * spec.num_tasks; }
};

SyntheticTestbed make_testbed(const TestbedSpec& spec);

// Accuracy of `delta` on every task. With `subsample`, n items per task are
// drawn without replacement from a stream derived from `stream`.
TaskAccuracy eval_builtin(const MergedDelta& delta, const SyntheticTestbed& bed,
                          std::optional<std::size_t> subsample = std::nullopt, std::uint64_t stream = 0);

class BuiltinEvaluator : public Evaluator {
 public:
  BuiltinEvaluator(const SyntheticTestbed& bed, std::optional<std::size_t> subsample)
      : bed_(bed), subsample_(subsample) {}
  TaskAccuracy evaluate(const MergedDelta& delta, std::uint64_t stream) override {
    return eval_builtin(delta, bed_, subsample_, stream);
  }

 private:
  const SyntheticTestbed& bed_;
  std::optional<std::size_t> subsample_;
};

// Directory layout: testbed.json, backbone.safetensors, eval.safetensors,
// adapters/<task>/adapter.safetensors (+ meta.json).
void export_testbed(const SyntheticTestbed& bed, const std::filesystem::path& dir);
SyntheticTestbed import_testbed(const std::filesystem::path& dir);

}  // namespace negmerge
