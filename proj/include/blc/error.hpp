#pragma once

#include <stdexcept>
#include <string>

namespace blc {

/// Error classes raised by the core library. The C API maps each kind to a
/// status code one-to-one.
enum class ErrorKind {
  Dimension,     // extents of operands do not line up
  Argument,      // bad axis, id, enum value, non-finite input
  Capacity,      // refusing to materialize something too large
  Convergence,   // iterative method ran out of iterations
  Training,      // loss went non-finite
  Format,        // bad magic / malformed file
  Length,        // truncated or oversized payload
  Version,       // unknown dtype or manifest version
  Integrity,     // hash mismatch, missing file
  Consistency,   // caller-supplied decomposition does not match the model
  Precondition,  // e.g. B-form analysis on a layer with biases
  Config,        // invalid run configuration
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Thrown by the ICA fixed-point iteration.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : Error(ErrorKind::Convergence, what), iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

/// Thrown when the training loss turns non-finite.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(ErrorKind::Training, what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace blc
