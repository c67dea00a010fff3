// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace toolshed {

/// Base of every error thrown by the library. Tool failures that the policy
/// should see are *not* exceptions; they travel back as ToolResult statuses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadArgs : public Error {
 public:
  using Error::Error;
};

class EncodeError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  DecodeError(std::size_t position, const std::string& what)
      : Error("decode error at byte " + std::to_string(position) + ": " + what), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class AlreadyRegistered : public Error {
 public:
  using Error::Error;
};

class ResourceExhausted : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class ScoreError : public Error {
 public:
  using Error::Error;
};

/// Policy transport failure. Distinct from a rollout that simply never answers.
class RolloutError : public Error {
 public:
  using Error::Error;
};

class RegistryUnreachable : public Error {
 public:
  using Error::Error;
};

}  // namespace toolshed
