#pragma once

#include <stdexcept>
#include <string>

namespace dflow {

// Bad input or configuration. The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value outside the domain an operation accepts (strict quantization, token ids).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Failure while running a stage (I/O, divergence). The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pipeline stage was invoked before the artifacts it depends on exist.
class StageOrderError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace dflow
