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

#include "common.hpp"

#include <iostream>
#include <mutex>

namespace negmerge {

std::optional<Projection> parse_projection(std::string_view name) {
  for (Projection p : kProjections) {
    if (projection_name(p) == name) return p;
  }
  return std::nullopt;
}

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

LogSink& sink_slot() {
  static LogSink sink = default_log_sink();
  return sink;
}

}  // namespace

LogSink default_log_sink() {
  return [](LogLevel level, std::string_view message) {
    if (level < LogLevel::warn) return;
    std::cerr << (level == LogLevel::warn ? "warning: " : "error: ") << message << '\n';
  };
}

void set_log_sink(LogSink sink) {
  std::lock_guard lock(sink_mutex());
  sink_slot() = std::move(sink);
}

void log(LogLevel level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (sink_slot()) sink_slot()(level, message);
}

}  // namespace negmerge
