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

#include "linalg.hpp"

#include <Eigen/SVD>

namespace negmerge::linalg {

Svd svd(const Matrix& m) {
  if (!m.allFinite()) fail(ErrorCode::invalid_argument, "SVD input contains non-finite entries");
  if (m.size() == 0) {
    const auto k = std::min(m.rows(), m.cols());
    return {Matrix::Zero(m.rows(), k), Vector::Zero(k), Matrix::Zero(m.cols(), k)};
  }
  Eigen::BDCSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) fail(ErrorCode::internal, "SVD did not converge");
  return {dec.matrixU(), dec.singularValues(), dec.matrixV()};
}

Matrix polar(const Matrix& m) {
  if (m.rows() < m.cols()) {
    fail(ErrorCode::invalid_argument, "polar factor needs rows >= cols, got " + std::to_string(m.rows()) +
                                          "x" + std::to_string(m.cols()));
  }
  const auto d = svd(m);
  return d.u * d.v.transpose();
}

Eigen::Index numerical_rank(const Vector& s, double rel_tol) {
  if (s.size() == 0 || s[0] <= 0.0) return 0;
  Eigen::Index k = 0;
  while (k < s.size() && s[k] > rel_tol * s[0]) ++k;
  return k;
}

}  // namespace negmerge::linalg
