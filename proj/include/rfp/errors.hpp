// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rfp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (bad key, shape mismatch, bad option).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition, or an internal invariant failed.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// File system or file-format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; carries the 1-based line number when known.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, int line)
      : IoError(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

// Process exit codes used by the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitContract = 3;
inline constexpr int kExitIo = 4;

}  // namespace rfp
