#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s2ip {

// Input that violates a documented precondition or invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor or matrix shapes that cannot be combined.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed text input. Carries the 1-based line number of the offending row.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t row, const std::string& what)
      : std::runtime_error("parse error at row " + std::to_string(row) + ": " + what), row_(row) {}

  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Weight file, embedding file or checkpoint that does not match what was expected.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Optimization hit a non-finite loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace s2ip
