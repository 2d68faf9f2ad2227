#ifndef RSDS_EVAL_HPP
#define RSDS_EVAL_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/types.hpp"

namespace rsds {

/// Maximum-weight perfect assignment on a square matrix (Hungarian method,
/// O(n^3)). Returns col_of_row.
inline std::vector<std::size_t> hungarian_max(const Eigen::MatrixXd& weight) {
  require(weight.rows() == weight.cols(), "hungarian_max: matrix must be square");
  const auto n = static_cast<std::size_t>(weight.rows());
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // Minimise cost = -weight with potentials; 1-based arrays, column 0 is a sentinel.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -weight(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(n);
  for (std::size_t j = 1; j <= n; ++j) col_of_row[p[j] - 1] = j - 1;
  return col_of_row;
}

struct LatentAlignment {
  std::vector<std::size_t> est_of_true;  // estimated dimension matched to each true dimension
  std::vector<double> correlation;       // signed Pearson correlation of each matched pair
  Eigen::MatrixXd abs_corr;              // m_true x m_est
};

struct MccResult {
  double score = 0.0;
  LatentAlignment alignment;
  std::size_t degenerate_dims = 0;  // estimated dimensions with zero variance
};

/// Mean absolute Pearson correlation after optimal matching of dimensions.
inline MccResult mcc(const std::vector<RowMatrix>& z_est, const std::vector<RowMatrix>& z_true) {
  require(z_est.size() == z_true.size() && !z_true.empty(), "mcc: sequence counts differ or are zero");
  const Eigen::Index m = z_true.front().cols();
  require(z_est.front().cols() == m, "mcc: latent dimensions differ");
  Eigen::Index rows = 0;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    require(z_est[i].rows() == z_true[i].rows() && z_est[i].cols() == m && z_true[i].cols() == m,
            "mcc: shapes differ");
    rows += z_true[i].rows();
  }
  Eigen::MatrixXd a(rows, m), b(rows, m);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    a.middleRows(at, z_true[i].rows()) = z_true[i];
    b.middleRows(at, z_true[i].rows()) = z_est[i];
    at += z_true[i].rows();
  }
  a.rowwise() -= a.colwise().mean();
  b.rowwise() -= b.colwise().mean();
  const Eigen::VectorXd sa = a.colwise().norm();
  const Eigen::VectorXd sb = b.colwise().norm();
  for (Eigen::Index j = 0; j < m; ++j) require(sa(j) > 0.0, "mcc: a true latent dimension has zero variance");
  MccResult r;
  Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    if (sb(j) == 0.0) {
      ++r.degenerate_dims;
      continue;
    }
    for (Eigen::Index i = 0; i < m; ++i) corr(i, j) = a.col(i).dot(b.col(j)) / (sa(i) * sb(j));
  }
  r.alignment.abs_corr = corr.cwiseAbs();
  r.alignment.est_of_true = hungarian_max(r.alignment.abs_corr);
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto j = static_cast<Eigen::Index>(r.alignment.est_of_true[static_cast<std::size_t>(i)]);
    total += r.alignment.abs_corr(i, j);
    r.alignment.correlation.push_back(corr(i, j));
  }
  r.score = total / static_cast<double>(m);
  return r;
}

struct F1Result {
  double score = 0.0;
  std::vector<std::size_t> true_of_est;  // regime permutation: estimated label -> true label
  std::vector<double> per_class;
};

/// Confusion counts C(e, t) over padded K x K labels.
inline Eigen::MatrixXd confusion(const std::vector<std::vector<std::uint32_t>>& s_est,
                                 const std::vector<std::vector<std::uint32_t>>& s_true, std::size_t K) {
  require(s_est.size() == s_true.size(), "regime_f1: sequence counts differ");
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
  for (std::size_t i = 0; i < s_true.size(); ++i) {
    require(s_est[i].size() == s_true[i].size(), "regime_f1: sequence lengths differ");
    for (std::size_t t = 0; t < s_true[i].size(); ++t) {
      require(s_est[i][t] < K && s_true[i][t] < K, "regime_f1: label out of range");
      c(s_est[i][t], s_true[i][t]) += 1.0;
    }
  }
  return c;
}

namespace detail {

/// Macro F1 when estimated label e is read as true label perm[e]. Classes
/// absent from both truth and prediction are left out of the average.
inline double macro_f1(const Eigen::MatrixXd& c, const std::vector<std::size_t>& perm, std::vector<double>* per_class) {
  const auto K = static_cast<std::size_t>(c.rows());
  const Eigen::VectorXd true_count = c.colwise().sum().transpose();
  const Eigen::VectorXd est_count = c.rowwise().sum();
  std::vector<std::size_t> est_of_true(K);
  for (std::size_t e = 0; e < K; ++e) est_of_true[perm[e]] = e;
  double total = 0.0;
  std::size_t classes = 0;
  if (per_class) per_class->assign(K, 0.0);
  for (std::size_t t = 0; t < K; ++t) {
    const std::size_t e = est_of_true[t];
    const double tp = c(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(t));
    const double denom = true_count(static_cast<Eigen::Index>(t)) + est_count(static_cast<Eigen::Index>(e));
    if (denom == 0.0) continue;
    const double f1 = 2.0 * tp / denom;
    if (per_class) (*per_class)[t] = f1;
    total += f1;
    ++classes;
  }
  return classes ? total / static_cast<double>(classes) : 0.0;
}

}  // namespace detail

/// Macro F1 under the best relabelling of the estimates. Exhaustive over
/// permutations for K <= 8, Hungarian on the confusion matrix otherwise.
/// Label sets of different size are padded to K = max(K_est, K_true).
inline F1Result regime_f1(const std::vector<std::vector<std::uint32_t>>& s_est,
                          const std::vector<std::vector<std::uint32_t>>& s_true, std::size_t K) {
  require(K >= 1, "regime_f1: K must be positive");
  const Eigen::MatrixXd c = confusion(s_est, s_true, K);
  F1Result r;
  std::vector<std::size_t> perm(K);
  std::iota(perm.begin(), perm.end(), 0);
  if (K <= 8) {
    double best = -1.0;
    do {
      const double f = detail::macro_f1(c, perm, nullptr);
      if (f > best) {
        best = f;
        r.true_of_est = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    // Weight of matching estimated e with true t: that pair's F1 contribution.
    const Eigen::VectorXd tc = c.colwise().sum().transpose();
    const Eigen::VectorXd ec = c.rowwise().sum();
    Eigen::MatrixXd w(c.rows(), c.cols());
    for (Eigen::Index e = 0; e < c.rows(); ++e)
      for (Eigen::Index t = 0; t < c.cols(); ++t) w(e, t) = tc(t) + ec(e) > 0 ? 2.0 * c(e, t) / (tc(t) + ec(e)) : 0.0;
    r.true_of_est = hungarian_max(w);
  }
  r.score = detail::macro_f1(c, r.true_of_est, &r.per_class);
  return r;
}

/// F1 with a fixed relabelling (estimated label e read as true label perm[e]).
inline double regime_f1_fixed(const std::vector<std::vector<std::uint32_t>>& s_est,
                              const std::vector<std::vector<std::uint32_t>>& s_true, std::size_t K,
                              const std::vector<std::size_t>& true_of_est) {
  require(true_of_est.size() == K, "regime_f1_fixed: permutation has wrong size");
  return detail::macro_f1(confusion(s_est, s_true, K), true_of_est, nullptr);
}

struct ForecastError {
  std::vector<double> per_step;  // mean over dimensions of the squared error
  double mean = 0.0;
};

inline ForecastError forecast_error(const RowMatrix& pred, const RowMatrix& truth) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(), "forecast_error: shapes differ");
  ForecastError r;
  if (pred.size() == 0) return r;
  const RowMatrix sq = (pred - truth).cwiseAbs2();
  for (Eigen::Index t = 0; t < sq.rows(); ++t) r.per_step.push_back(sq.row(t).mean());
  r.mean = sq.mean();
  return r;
}

}  // namespace rsds

#endif  // RSDS_EVAL_HPP
