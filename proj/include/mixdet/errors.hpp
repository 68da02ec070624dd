#pragma once

#include <stdexcept>
#include <string>

namespace mixdet {

/// Bad or unparseable configuration input (malformed file, unknown key).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A structurally valid input that violates a documented invariant.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint cannot be used: wrong format version or failed checksum.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training aborted on a non-finite loss; diagnostics are on disk.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Metric requested on an empty input (no correct boxes).
struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mixdet
