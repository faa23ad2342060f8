#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace kd {

// Bad caller-supplied value (shape mismatch, out-of-range label, ...).
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Name not present in a registry.
struct NotFoundError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A declared capability (e.g. pretrained weights) cannot be provided.
struct UnavailableError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset manifest violates the expected layout; carries the 1-based row.
struct ManifestError : std::runtime_error {
  ManifestError(const std::string& msg, long row)
      : std::runtime_error(msg + " (manifest row " + std::to_string(row) + ")"),
        row(row) {}
  long row;
};

// Checkpoint file cannot be decoded; carries the byte offset of the failure.
struct CheckpointError : std::runtime_error {
  CheckpointError(const std::string& msg, std::uint64_t offset)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  explicit CheckpointError(const std::string& msg)
      : std::runtime_error(msg), offset(0) {}
  std::uint64_t offset;
};

// Run configuration is inconsistent or contains unknown keys.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss; carries the offending component name.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& msg, std::string component)
      : std::runtime_error(msg), component(std::move(component)) {}
  std::string component;
};

}  // namespace kd
