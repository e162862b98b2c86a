#pragma once

#include <stdexcept>
#include <string>

namespace hvcm {

/// Failure classes. The CLI maps each onto a stable exit code.
enum class ErrorKind {
  invalid_input,  // malformed files, bad flags, shape mismatches
  degenerate_fit, // covariance factorization failed after ridge escalation
  divergence,     // training produced a non-finite loss
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) {
  throw Error(ErrorKind::invalid_input, what);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return 2;
    case ErrorKind::degenerate_fit: return 3;
    case ErrorKind::divergence: return 4;
  }
  return 1;
}

}  // namespace hvcm
