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

#include "cma_es.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace negmerge {

using nlohmann::json;

namespace {

constexpr double kEigenFloor = 1e-20;

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_vec(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace

CmaState CmaState::init(std::size_t dim, const Vector& mean, double sigma0, std::size_t pop) {
  if (dim == 0) fail(ErrorCode::invalid_argument, "CMA-ES dimension must be positive");
  if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) fail(ErrorCode::invalid_argument, "sigma0 must be positive");
  if (pop < 2) fail(ErrorCode::invalid_argument, "population size must be at least 2");
  if (static_cast<std::size_t>(mean.size()) != dim || !mean.allFinite()) {
    fail(ErrorCode::invalid_argument, "initial mean must be a finite vector of length " + std::to_string(dim));
  }
  CmaState s;
  s.n_ = dim;
  s.lambda_ = pop;
  s.mean_ = mean;
  s.sigma_ = sigma0;
  s.cov_ = Matrix::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  s.ps_ = Vector::Zero(static_cast<Eigen::Index>(dim));
  s.pc_ = s.ps_;
  s.set_constants();
  return s;
}

void CmaState::set_constants() {
  const double n = static_cast<double>(n_);
  const double lam = static_cast<double>(lambda_);
  mu_ = lambda_ / 2;
  weights_.resize(static_cast<Eigen::Index>(mu_));
  for (std::size_t i = 0; i < mu_; ++i) {
    weights_[static_cast<Eigen::Index>(i)] = std::log((lam + 1.0) / 2.0) - std::log(static_cast<double>(i + 1));
  }
  weights_ /= weights_.sum();
  mueff_ = 1.0 / weights_.squaredNorm();
  cs_ = (mueff_ + 2.0) / (n + mueff_ + 5.0);
  ds_ = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff_ - 1.0) / (n + 1.0)) - 1.0) + cs_;
  cc_ = (4.0 + mueff_ / n) / (n + 4.0 + 2.0 * mueff_ / n);
  c1_ = 2.0 / ((n + 1.3) * (n + 1.3) + mueff_);
  cmu_ = std::min(1.0 - c1_, 2.0 * (mueff_ - 2.0 + 1.0 / mueff_) / ((n + 2.0) * (n + 2.0) + mueff_));
  chi_ = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
}

void CmaState::decompose() {
  for (int attempt = 0; attempt < 2; ++attempt) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov_);
    if (es.info() == Eigen::Success && es.eigenvalues().allFinite()) {
      basis_ = es.eigenvectors();
      scales_ = es.eigenvalues().cwiseMax(kEigenFloor).cwiseSqrt();
      decomposed_ = true;
      return;
    }
    // Repair: symmetrize and floor the diagonal, then retry once.
    cov_ = 0.5 * (cov_ + cov_.transpose());
    cov_.diagonal() = cov_.diagonal().cwiseMax(kEigenFloor);
    if (!cov_.allFinite()) break;
  }
  fail(ErrorCode::internal, "CMA-ES covariance could not be decomposed");
}

std::vector<Vector> CmaState::ask(Rng& rng) {
  decompose();
  const auto n = static_cast<Eigen::Index>(n_);
  std::vector<Vector> out;
  out.reserve(lambda_);
  Vector xi(n);
  for (std::size_t k = 0; k < lambda_; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) xi[i] = rng.normal();
    out.push_back(mean_ + sigma_ * (basis_ * scales_.cwiseProduct(xi)));
  }
  return out;
}

void CmaState::tell(const std::vector<Vector>& candidates, const std::vector<double>& fitness) {
  if (candidates.size() != lambda_ || fitness.size() != lambda_) {
    fail(ErrorCode::invalid_argument, "tell expects " + std::to_string(lambda_) + " candidates and fitness values");
  }
  if (!decomposed_) decompose();

  std::vector<std::size_t> order(lambda_);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const bool na = std::isnan(fitness[a]), nb = std::isnan(fitness[b]);
    if (na || nb) return !na && nb;
    return fitness[a] > fitness[b];
  });

  const auto n = static_cast<Eigen::Index>(n_);
  Matrix y(n, static_cast<Eigen::Index>(mu_));
  for (std::size_t i = 0; i < mu_; ++i) y.col(static_cast<Eigen::Index>(i)) = (candidates[order[i]] - mean_) / sigma_;
  const Vector yw = y * weights_;
  mean_ += sigma_ * yw;

  const Vector c_inv_sqrt_yw = basis_ * (basis_.transpose() * yw).cwiseQuotient(scales_);
  ps_ = (1.0 - cs_) * ps_ + std::sqrt(cs_ * (2.0 - cs_) * mueff_) * c_inv_sqrt_yw;
  const double ps_norm = ps_.norm();
  const double decay = 1.0 - std::pow(1.0 - cs_, 2.0 * static_cast<double>(generation_ + 1));
  const bool hsig = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (static_cast<double>(n_) + 1.0)) * chi_;
  pc_ = (1.0 - cc_) * pc_ + (hsig ? std::sqrt(cc_ * (2.0 - cc_) * mueff_) : 0.0) * yw;
  const double dh = (hsig ? 0.0 : 1.0) * cc_ * (2.0 - cc_);

  const Matrix rank_mu = y * weights_.asDiagonal() * y.transpose();
  cov_ = (1.0 + c1_ * dh - c1_ - cmu_) * cov_ + c1_ * (pc_ * pc_.transpose()) + cmu_ * rank_mu;
  cov_ = 0.5 * (cov_ + cov_.transpose());
  sigma_ *= std::exp((cs_ / ds_) * (ps_norm / chi_ - 1.0));
  ++generation_;
  decomposed_ = false;
}

json CmaState::to_json() const {
  return {{"dim", n_},           {"pop", lambda_},     {"generation", generation_},
          {"sigma", sigma_},     {"mean", to_vec(mean_)}, {"ps", to_vec(ps_)},
          {"pc", to_vec(pc_)}};
}

void CmaState::save_cov(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = cov_;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

CmaState CmaState::from_json(const json& j, const std::filesystem::path& cov_path) {
  CmaState s;
  try {
    s.n_ = j.at("dim").get<std::size_t>();
    s.lambda_ = j.at("pop").get<std::size_t>();
    s.generation_ = j.at("generation").get<std::size_t>();
    s.sigma_ = j.at("sigma").get<double>();
    s.mean_ = from_vec(j.at("mean").get<std::vector<double>>());
    s.ps_ = from_vec(j.at("ps").get<std::vector<double>>());
    s.pc_ = from_vec(j.at("pc").get<std::vector<double>>());
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, std::string("CMA-ES checkpoint: ") + e.what());
  }
  const auto n = static_cast<Eigen::Index>(s.n_);
  if (s.mean_.size() != n || s.ps_.size() != n || s.pc_.size() != n || s.lambda_ < 2) {
    fail(ErrorCode::schema, "CMA-ES checkpoint vectors disagree with its dimension");
  }
  std::ifstream in(cov_path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + cov_path.string());
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(n, n);
  in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::schema, cov_path.string() + " does not hold a " + std::to_string(n) + "x" + std::to_string(n) +
                                " f64 matrix");
  }
  s.cov_ = rm;
  s.set_constants();
  return s;
}

}  // namespace negmerge
