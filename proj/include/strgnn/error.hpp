#pragma once

#include <stdexcept>
#include <string>

namespace strgnn {

// Error taxonomy. The CLI and the C API map these onto exit codes /
// status values, so new failure modes should reuse one of the classes
// below rather than throwing std::runtime_error directly.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value (bad snapshot count, empty split, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Unusable input data: parse failures, empty files, unknown node keys.
class DataError : public Error {
public:
  using Error::Error;
};

// Filesystem-level failure (unreadable / unwritable path).
class IoError : public Error {
public:
  using Error::Error;
};

// Tensor shape or op contract violation; message names both shapes.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Numeric failure during training or evaluation (NaN loss and friends).
class NumericError : public Error {
public:
  using Error::Error;
};

// Retry budget exhausted while drawing negatives or injected anomalies.
class SamplingError : public Error {
public:
  using Error::Error;
};

}  // namespace strgnn
