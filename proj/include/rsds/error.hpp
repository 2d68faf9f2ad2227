#ifndef RSDS_ERROR_HPP
#define RSDS_ERROR_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

namespace rsds {

/// Raised when a caller breaks a documented precondition (shapes, ranges, finiteness).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Raised for malformed files and configuration text.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when an optimisation or decomposition cannot reach its tolerance.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace rsds

#endif  // RSDS_ERROR_HPP
