#pragma once

#include <stdexcept>
#include <string>

namespace meas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents or ranks passed to an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (out-of-range k, negative sigma, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a forward value or a gradient. `op()` names the
/// first operation that produced it.
class NumericalError : public Error {
 public:
  NumericalError(std::string op, const std::string& what)
      : Error("numerical failure in op '" + op + "': " + what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Bad input data: unreadable files, empty datasets, malformed images.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration or command-line usage.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace meas
