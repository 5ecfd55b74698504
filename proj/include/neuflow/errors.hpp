#pragma once

#include <stdexcept>

namespace neuflow {

/// Tensor shapes or spatial sizes that do not fit an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration record, block spec or override.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// File exists but is not in the expected format (bad magic, unknown version).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File header is recognized but the payload is truncated or inconsistent.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace neuflow
