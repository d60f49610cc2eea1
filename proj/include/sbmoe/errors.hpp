#pragma once

#include <stdexcept>
#include <string>

namespace sbmoe {

// Incompatible dimensions between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, zero norms, degenerate statistics.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateVarianceError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Malformed binary or text input. Carries the byte offset (binary) or line
// number (text) in the message.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input that is inconsistent (unknown ids, empty overlaps).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyper-parameters or configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace sbmoe
