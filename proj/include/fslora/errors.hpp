#pragma once

#include <stdexcept>
#include <string>

namespace fslora {

// Shape mismatch between matrix operands. Message names both shapes.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Index or size outside the valid range for the operation.
struct RangeError : std::out_of_range {
  explicit RangeError(const std::string& msg) : std::out_of_range(msg) {}
};

// Numerical failure: non-finite values, non-convergence (message carries iteration count).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// A federation/protocol contract was violated (e.g. an update leaked outside its index set).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Bad experiment configuration; message lists the offending keys / values.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Importance scores degenerate (all zero): no sampling distribution exists.
struct DegenerateScoresError : std::runtime_error {
  explicit DegenerateScoresError(const std::string& msg) : std::runtime_error(msg) {}
};

// File / serialization problems (bad magic, truncated payload, unwritable path).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fslora
