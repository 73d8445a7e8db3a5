#pragma once

#include <stdexcept>
#include <string>

namespace voldeform {

// Shape or argument contract violation. Maps to exit code 1 in the CLI.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, failed numeric checks, diverged runs.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad config files, unknown enum strings, invalid CLI input. Exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File format violations: truncated payloads, bad magic, missing files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace voldeform
