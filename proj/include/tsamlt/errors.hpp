#pragma once

#include <stdexcept>
#include <string>

namespace tsamlt {

/// Extents of two operands disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A forward value became NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed TSAE file, manifest or checkpoint.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or unsatisfiable request (e.g. too few videos).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the autodiff tape (double backward, non-scalar loss).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace tsamlt
