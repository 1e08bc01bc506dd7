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

#include "subprocess.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <mutex>
#include <poll.h>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "common.hpp"

namespace negmerge {

namespace {

// A dead child must surface as an error from write(), not kill the host.
void ignore_sigpipe_once() {
  static std::once_flag once;
  std::call_once(once, [] {
    struct sigaction current{};
    if (sigaction(SIGPIPE, nullptr, &current) == 0 && current.sa_handler == SIG_DFL) std::signal(SIGPIPE, SIG_IGN);
  });
}

std::string errno_text() { return std::strerror(errno); }

}  // namespace

ChildProcess::ChildProcess(const std::vector<std::string>& argv) {
  if (argv.empty()) fail(ErrorCode::config, "evaluator command line is empty");
  ignore_sigpipe_once();

  int to_child[2], from_child[2], status_pipe[2];
  if (pipe2(to_child, O_CLOEXEC) != 0 || pipe2(from_child, O_CLOEXEC) != 0 || pipe2(status_pipe, O_CLOEXEC) != 0) {
    fail(ErrorCode::io, "pipe: " + errno_text());
  }
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  pid_ = fork();
  if (pid_ < 0) fail(ErrorCode::io, "fork: " + errno_text());
  if (pid_ == 0) {
    dup2(to_child[0], STDIN_FILENO);
    dup2(from_child[1], STDOUT_FILENO);
    execvp(args[0], args.data());
    const int err = errno;
    [[maybe_unused]] auto n = ::write(status_pipe[1], &err, sizeof(err));
    _exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  ::close(status_pipe[1]);
  in_fd_ = to_child[1];
  out_fd_ = from_child[0];

  // The status pipe closes on a successful exec; otherwise it carries errno.
  int err = 0;
  const auto n = ::read(status_pipe[0], &err, sizeof(err));
  ::close(status_pipe[0]);
  if (n == sizeof(err)) {
    waitpid(pid_, nullptr, 0);
    pid_ = -1;
    ::close(in_fd_);
    ::close(out_fd_);
    in_fd_ = out_fd_ = -1;
    fail(ErrorCode::config, "cannot launch evaluator '" + argv[0] + "': " + std::strerror(err));
  }
}

ChildProcess::~ChildProcess() {
  if (pid_ > 0) close(std::chrono::milliseconds(500));
}

void ChildProcess::write_line(const std::string& line) {
  if (in_fd_ < 0) fail(ErrorCode::protocol, "evaluator input is closed");
  std::string data = line + "\n";
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = ::write(in_fd_, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::protocol, "evaluator stopped reading its input: " + errno_text());
    }
    off += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> ChildProcess::read_line(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd pfd{out_fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::io, "poll: " + errno_text());
    }
    if (rc == 0) continue;
    char chunk[4096];
    const auto n = ::read(out_fd_, chunk, sizeof(chunk));
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::io, "read: " + errno_text());
    }
    if (n == 0) fail(ErrorCode::protocol, "evaluator closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

int ChildProcess::close(std::chrono::milliseconds grace) {
  if (in_fd_ >= 0) ::close(in_fd_);
  in_fd_ = -1;
  int status = 0;
  if (pid_ > 0) {
    const auto deadline = std::chrono::steady_clock::now() + grace;
    while (true) {
      const pid_t r = waitpid(pid_, &status, WNOHANG);
      if (r == pid_ || r < 0) break;
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    pid_ = -1;
  }
  if (out_fd_ >= 0) ::close(out_fd_);
  out_fd_ = -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void ChildProcess::kill() {
  if (pid_ > 0) {
    ::kill(pid_, SIGKILL);
    waitpid(pid_, nullptr, 0);
    pid_ = -1;
  }
  if (in_fd_ >= 0) ::close(in_fd_);
  if (out_fd_ >= 0) ::close(out_fd_);
  in_fd_ = out_fd_ = -1;
}

}  // namespace negmerge
