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

#include "common.hpp"

namespace negmerge::linalg {

struct Svd {
  Matrix u;  // m x k, orthonormal columns
  Vector s;  // k, descending
  Matrix v;  // n x k, orthonormal columns
};

// Thin SVD with k = min(m, n). Rejects non-finite input.
Svd svd(const Matrix& m);

// Nearest matrix with orthonormal columns in Frobenius norm: P * Q^T where
// m = P * S * Q^T. Requires rows >= cols.
Matrix polar(const Matrix& m);

// Number of leading singular values above rel_tol * s[0].
Eigen::Index numerical_rank(const Vector& s, double rel_tol = 1e-12);

}  // namespace negmerge::linalg
