#pragma once

#include <stdexcept>
#include <string>

namespace amr {

// Shape and range violations use std::invalid_argument directly. The types
// below map onto the CLI exit codes.

/// Bad flag, config key or value (exit 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or corrupt dataset files (exit 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss term went NaN/Inf (exit 4). `term` names the offending entry.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

/// Components wired together inconsistently (channel counts, checkpoint
/// architecture, resume config).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace amr
