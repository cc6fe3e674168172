#pragma once

#include <stdexcept>
#include <string>

namespace semline {

/// Error categories; the CLI maps each category to a distinct exit code.
enum class ErrorCategory : int {
  config = 2,      // bad configuration value or combination
  validation = 3,  // data violates a documented invariant
  training = 4,    // optimization failed (non-finite loss/gradient)
  io = 5,          // file missing, unreadable, or malformed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error(ErrorCategory::validation, m) {}
};

/// A line whose endpoints do not describe a proper boundary-to-boundary chord,
/// or whose induced regions collapse below measurable area.
struct DegenerateLineError : ValidationError {
  explicit DegenerateLineError(const std::string& m) : ValidationError(m) {}
};

/// A pooling strip that contains no grid cells cannot produce a feature.
struct DegenerateRegionError : ValidationError {
  explicit DegenerateRegionError(const std::string& m) : ValidationError(m) {}
};

/// Mismatched tensor/grid shapes.
struct DimensionError : ValidationError {
  explicit DimensionError(const std::string& m) : ValidationError(m) {}
};

/// Candidate enumeration produced no usable lines.
struct EmptyCandidateError : ValidationError {
  explicit EmptyCandidateError(const std::string& m) : ValidationError(m) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& m) : Error(ErrorCategory::training, m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorCategory::io, m) {}
};

}  // namespace semline
