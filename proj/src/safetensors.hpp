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

// Minimal reader/writer for the safetensors container: an 8-byte
// little-endian header length, a JSON header, then the raw tensor buffer.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"

namespace negmerge::safetensors {

enum class DType { f32, f64, i64 };

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);

struct Tensor {
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;  // row-major, little-endian

  std::size_t numel() const;

  // Rank-2 float tensors only (f32 or f64). Shape [rows, cols].
  Matrix to_matrix() const;
  std::vector<std::int64_t> to_i64() const;

  static Tensor from_matrix_f32(const Matrix& m);
  static Tensor from_i64(const std::vector<std::int64_t>& values);
};

struct File {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor& at(const std::string& name) const;
};

File read(const std::filesystem::path& path);

// Tensors are laid out in name order so identical inputs produce identical bytes.
void write(const std::filesystem::path& path, const File& file);

}  // namespace negmerge::safetensors
