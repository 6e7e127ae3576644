#ifndef SPANSET_ERROR_HPP
#define SPANSET_ERROR_HPP

#include <stdexcept>
#include <string>

namespace spanset {

/// Shapes or sizes of the arguments do not agree.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

/// Input data is malformed, missing or inconsistent with a configuration.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced non-finite losses and was aborted.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spanset

#endif  // SPANSET_ERROR_HPP
