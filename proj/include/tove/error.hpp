// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tove {

/// Coarse classification used by the CLI to pick an exit code.
enum class ErrorKind {
  Validation,  // bad shapes, bad config, bad arguments -> exit 1
  Io,          // filesystem / serialization failures   -> exit 2
};

struct Error : std::runtime_error {
  ErrorKind kind;
  Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

inline Error validation_error(const std::string& msg) { return Error(ErrorKind::Validation, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::Io, msg); }

#define TOVE_CHECK(cond, msg)                              \
  do {                                                     \
    if (!(cond)) throw ::tove::validation_error(msg);      \
  } while (0)

}  // namespace tove
