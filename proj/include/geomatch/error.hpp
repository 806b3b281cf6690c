#pragma once

#include <stdexcept>
#include <string>

namespace geomatch {

// Process exit codes shared by the CLI: 1 usage, 2 data, 3 numerical.
enum class ErrorCategory { Usage = 1, Data = 2, Numerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  [[nodiscard]] ErrorCategory category() const noexcept { return category_; }
  [[nodiscard]] int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorCategory::Usage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorCategory::Numerical, what) {}
};

/// Raised when a homography sends a point to (or near) the line at infinity.
class ProjectiveSingularityError : public NumericalError {
 public:
  ProjectiveSingularityError(std::size_t index, double x, double y, double w)
      : NumericalError("projective singularity at point " + std::to_string(index) + " (" +
                       std::to_string(x) + ", " + std::to_string(y) +
                       "): |w'| = " + std::to_string(w)),
        index_(index) {}

  [[nodiscard]] std::size_t point_index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Collinear or rank-deficient point configuration.
class DegenerateConfigurationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Zero-norm or constant descriptor in a feature map.
class DegenerateDescriptorError : public NumericalError {
 public:
  DegenerateDescriptorError(const char* map, int row, int col, const std::string& why)
      : NumericalError(std::string("degenerate descriptor in ") + map + " at cell (" +
                       std::to_string(row) + ", " + std::to_string(col) + "): " + why),
        row_(row),
        col_(col) {}

  [[nodiscard]] int row() const noexcept { return row_; }
  [[nodiscard]] int col() const noexcept { return col_; }

 private:
  int row_;
  int col_;
};

}  // namespace geomatch
