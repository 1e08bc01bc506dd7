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

#include "safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace negmerge::safetensors {

static_assert(std::endian::native == std::endian::little,
              "safetensors I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

DType parse_dtype(const std::string& s, const std::string& tensor) {
  if (s == "F32") return DType::f32;
  if (s == "F64") return DType::f64;
  if (s == "I64") return DType::i64;
  fail(ErrorCode::unsupported, "tensor '" + tensor + "' has unsupported dtype " + s);
}

}  // namespace

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::f32: return "F32";
    case DType::f64: return "F64";
    case DType::i64: return "I64";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Matrix Tensor::to_matrix() const {
  if (shape.size() != 2) {
    fail(ErrorCode::shape, "expected a rank-2 tensor, got rank " + std::to_string(shape.size()));
  }
  const auto rows = static_cast<Eigen::Index>(shape[0]);
  const auto cols = static_cast<Eigen::Index>(shape[1]);
  Matrix m(rows, cols);
  if (dtype == DType::f32) {
    std::vector<float> buf(numel());
    std::memcpy(buf.data(), bytes.data(), bytes.size());
    m = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            buf.data(), rows, cols)
            .cast<double>();
  } else if (dtype == DType::f64) {
    std::vector<double> buf(numel());
    std::memcpy(buf.data(), bytes.data(), bytes.size());
    m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        buf.data(), rows, cols);
  } else {
    fail(ErrorCode::schema, "expected a floating-point tensor");
  }
  return m;
}

std::vector<std::int64_t> Tensor::to_i64() const {
  if (dtype != DType::i64) fail(ErrorCode::schema, "expected an I64 tensor");
  std::vector<std::int64_t> out(numel());
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

Tensor Tensor::from_matrix_f32(const Matrix& m) {
  Tensor t;
  t.dtype = DType::f32;
  t.shape = {m.rows(), m.cols()};
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m.cast<float>();
  t.bytes.resize(static_cast<std::size_t>(rm.size()) * sizeof(float));
  if (!t.bytes.empty()) std::memcpy(t.bytes.data(), rm.data(), t.bytes.size());
  return t;
}

Tensor Tensor::from_i64(const std::vector<std::int64_t>& values) {
  Tensor t;
  t.dtype = DType::i64;
  t.shape = {static_cast<std::int64_t>(values.size())};
  t.bytes.resize(values.size() * sizeof(std::int64_t));
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
  return t;
}

const Tensor& File::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorCode::schema, "missing tensor '" + name + "'");
  return it->second;
}

File read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  std::uint64_t header_len = 0;
  if (file_size < 8 || !in.read(reinterpret_cast<char*>(&header_len), 8)) {
    fail(ErrorCode::io, path.string() + ": truncated safetensors header");
  }
  if (header_len > kMaxHeaderBytes || 8 + header_len > file_size) {
    fail(ErrorCode::schema, path.string() + ": implausible header length " + std::to_string(header_len));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  const std::uint64_t data_len = file_size - 8 - header_len;
  std::vector<std::uint8_t> data(data_len);
  if (data_len > 0) in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data_len));
  if (!in) fail(ErrorCode::io, path.string() + ": short read");

  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    fail(ErrorCode::schema, path.string() + ": malformed header JSON: " + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::schema, path.string() + ": header is not a JSON object");

  File file;
  for (auto& [name, entry] : j.items()) {
    if (name == "__metadata__") {
      for (auto& [k, v] : entry.items()) {
        if (!v.is_string()) fail(ErrorCode::schema, path.string() + ": metadata values must be strings");
        file.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    try {
      Tensor t;
      t.dtype = parse_dtype(entry.at("dtype").get<std::string>(), name);
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_len) {
        fail(ErrorCode::schema, path.string() + ": bad data_offsets for '" + name + "'");
      }
      for (auto d : t.shape) {
        if (d < 0) fail(ErrorCode::schema, path.string() + ": negative dimension in '" + name + "'");
      }
      if (offsets[1] - offsets[0] != t.numel() * dtype_size(t.dtype)) {
        fail(ErrorCode::schema, path.string() + ": byte size mismatch for '" + name + "'");
      }
      t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(offsets[0]),
                     data.begin() + static_cast<std::ptrdiff_t>(offsets[1]));
      file.tensors.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      fail(ErrorCode::schema, path.string() + ": bad entry for '" + name + "': " + e.what());
    }
  }
  return file;
}

void write(const std::filesystem::path& path, const File& file) {
  json header = json::object();
  if (!file.metadata.empty()) header["__metadata__"] = file.metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) {
      fail(ErrorCode::internal, "tensor '" + name + "' byte size does not match its shape");
    }
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + t.bytes.size()}}};
    offset += t.bytes.size();
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : file.tensors) {
    out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  }
  if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

}  // namespace negmerge::safetensors
