#pragma once

#include <stdexcept>
#include <string>

namespace sensor3d {

// Bad shapes, bad arguments, unknown names.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Checkpoint or run config disagrees with what the caller expects.
class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File exists but its header cannot be parsed.
class MalformedFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Header parsed but the payload is shorter than the header promises.
class TruncatedFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sensor3d
