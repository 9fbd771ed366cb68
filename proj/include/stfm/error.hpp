#pragma once

#include <stdexcept>
#include <string>

namespace stfm {

// Base class for every failure the library reports on purpose. Callers that
// want a single catch site can catch this; the CLI maps it to exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or size mismatch between tensors / matrices / images.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Numeric-domain violation (log of a negative value, division by zero, ...).
// Messages identify the offending flat index so debugging stays cheap.
class DomainError : public Error {
 public:
  using Error::Error;
};

// API misuse: calling backward on a non-scalar, mixing tensors across tapes,
// touching gradients that were never computed, and similar contract breaks.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (bad magic, truncated stream, corrupt payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Robust estimation could not produce a model (too few matches, degenerate
// geometry, no consensus).
class EstimationError : public Error {
 public:
  using Error::Error;
};

// I/O failure talking to the filesystem.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace stfm
