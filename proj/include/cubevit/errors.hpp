#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cubevit {

// Caller violated a precondition (bad shape, bad argument, bad config key).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor shape does not match what an op or a checkpoint expects.
class ShapeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Input is well-formed but mathematically degenerate (zero vector, constant data).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf appeared during a forward pass or a training step.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::int64_t where)
      : std::runtime_error(what), where_(where) {}
  // Layer index or optimizer step, depending on the raiser.
  std::int64_t where() const noexcept { return where_; }

 private:
  std::int64_t where_;
};

// Malformed file on disk.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace cubevit
