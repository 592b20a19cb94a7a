#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pforge {

enum class ErrorKind {
  invalid_argument,
  too_small_input,
  solver_failed,
  backend_error,
  degenerate_landmarks,
  degenerate_profile,
  generator_unreachable,
  protocol_error,
  generation_failed,
  two_step_failed,
  io_error,
};

std::string_view to_string(ErrorKind kind);

// Library failure with a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class SolverFailed : public Error {
 public:
  SolverFailed(const std::string& message, double residual)
      : Error(ErrorKind::solver_failed, message), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace pforge
