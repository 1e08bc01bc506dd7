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

// (mu/mu_w, lambda)-CMA-ES with the usual default strategy parameters,
// maximizing.

#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "random.hpp"

namespace negmerge {

class CmaState {
 public:
  static CmaState init(std::size_t dim, const Vector& mean, double sigma0, std::size_t pop);

  // pop samples mean + sigma * B * D * xi, xi drawn from `rng` candidate by
  // candidate.
  std::vector<Vector> ask(Rng& rng);
  // Rank-based update; NaN fitness ranks below everything, ties go to the
  // lower candidate index.
  void tell(const std::vector<Vector>& candidates, const std::vector<double>& fitness);

  std::size_t dim() const { return n_; }
  std::size_t pop() const { return lambda_; }
  std::size_t parents() const { return mu_; }
  std::size_t generation() const { return generation_; }
  const Vector& mean() const { return mean_; }
  double sigma() const { return sigma_; }
  const Matrix& cov() const { return cov_; }
  const Vector& weights() const { return weights_; }
  double mueff() const { return mueff_; }
  double cs() const { return cs_; }
  double ds() const { return ds_; }
  double cc() const { return cc_; }
  double c1() const { return c1_; }
  double cmu() const { return cmu_; }
  double chi_n() const { return chi_; }

  // Scalars and vectors as JSON; the covariance goes to a raw little-endian
  // f64 file (row-major, dim x dim).
  nlohmann::json to_json() const;
  void save_cov(const std::filesystem::path& path) const;
  static CmaState from_json(const nlohmann::json& j, const std::filesystem::path& cov_path);

 private:
  void set_constants();
  void decompose();

  std::size_t n_ = 0, lambda_ = 0, mu_ = 0, generation_ = 0;
  Vector weights_;
  double mueff_ = 0, cs_ = 0, ds_ = 0, cc_ = 0, c1_ = 0, cmu_ = 0, chi_ = 0;
  Vector mean_, ps_, pc_;
  double sigma_ = 0;
  Matrix cov_;
  // Eigen decomposition of cov_ (cov = B diag(D^2) B^T).
  Matrix basis_;
  Vector scales_;
  bool decomposed_ = false;
};

}  // namespace negmerge
