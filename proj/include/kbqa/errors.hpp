#pragma once

#include <stdexcept>
#include <string>

namespace kbqa {

// Tensor shapes do not agree for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: bad arguments, wrong call order, out-of-range labels.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input is well-formed but degenerate (zero-norm vector, empty phrase).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A forward op produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file could not be parsed. Carries the offending line when known.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}
  explicit LoadError(const std::string& what) : std::runtime_error(what) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_ = 0;
};

// Referential-integrity or label problem in otherwise parseable data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kbqa
