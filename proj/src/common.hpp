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

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace negmerge {

// All arithmetic runs in double precision; tensors are stored as f32 on disk.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Element-wise round trip through float. Written as a plain loop because the
// chained Eigen casts were observed to skip the rounding on some elements.
inline Matrix round_to_f32(Matrix m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
  return m;
}

enum class Projection : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::size_t kNumProjections = 4;
inline constexpr std::array<Projection, kNumProjections> kProjections = {
    Projection::q, Projection::k, Projection::v, Projection::o};

constexpr std::string_view projection_name(Projection p) {
  constexpr std::array<std::string_view, kNumProjections> names = {"q", "k", "v", "o"};
  return names[static_cast<std::size_t>(p)];
}

std::optional<Projection> parse_projection(std::string_view name);

enum class ErrorCode {
  invalid_argument,
  io,
  schema,
  shape,
  config,
  protocol,
  timeout,
  evaluator,
  unsupported,
  internal,
};

/// Every failure raised by the library carries one of the codes above so the
/// C layer can map it onto a stable status value.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };

using LogSink = std::function<void(LogLevel, std::string_view)>;

// Replaces the process-wide sink. The default sink writes warnings and errors
// to stderr.
void set_log_sink(LogSink sink);
LogSink default_log_sink();
void log(LogLevel level, std::string_view message);
inline void warn(std::string_view message) { log(LogLevel::warn, message); }
inline void info(std::string_view message) { log(LogLevel::info, message); }

}  // namespace negmerge
