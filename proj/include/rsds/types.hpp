#ifndef RSDS_TYPES_HPP
#define RSDS_TYPES_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace rsds {

/// Row-major dense matrix; a T x m sequence keeps each time step contiguous.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Log-domain floor for probabilities (double underflow boundary).
inline constexpr double kLogFloor = -745.0;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline std::span<const double> row_span(const RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<double> row_span(RowMatrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline double log_sum_exp(std::span<const double> v) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

/// In-place log-softmax.
inline void log_softmax(std::span<double> v) {
  const double c = log_sum_exp(v);
  for (double& x : v) x -= c;
}

}  // namespace rsds

#endif  // RSDS_TYPES_HPP
