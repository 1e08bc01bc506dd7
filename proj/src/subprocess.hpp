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

// Line-oriented child process over pipes (POSIX).

#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <sys/types.h>
#include <vector>

namespace negmerge {

class ChildProcess {
 public:
  // Starts argv[0] (PATH lookup) with stdin/stdout piped; stderr is inherited.
  explicit ChildProcess(const std::vector<std::string>& argv);
  ~ChildProcess();
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  void write_line(const std::string& line);
  // Next line without its terminator; nullopt on timeout. Throws when the
  // child closes its output.
  std::optional<std::string> read_line(std::chrono::milliseconds timeout);
  // Closes stdin and reaps the child, killing it after `grace`.
  int close(std::chrono::milliseconds grace = std::chrono::milliseconds(2000));
  void kill();
  bool running() const { return pid_ > 0; }

 private:
  pid_t pid_ = -1;
  int in_fd_ = -1;   // child's stdin
  int out_fd_ = -1;  // child's stdout
  std::string buffer_;
};

}  // namespace negmerge
