#ifndef RSDS_THEORY_HPP
#define RSDS_THEORY_HPP

// Checks for the identifiability conditions of an rMSM and the constructive
// pieces behind them: likelihood margins, the posterior-dominance horizon,
// ratio matrices and recovery of the linear mixing up to permutation and
// scaling by simultaneous diagonalisation.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/rmsm.hpp"
#include "rsds/types.hpp"

namespace rsds {

// ---------------------------------------------------------------------------
// Margins and dominance

/// Margin of regime i at z_prev: min over k != i of
/// log N(m_i(z); m_i(z), S_i) - log N(m_i(z); m_k(z), S_k).
/// +inf when K = 1.
inline double gaussian_margin(const RmsmParams& p, std::span<const double> z_prev, std::size_t i) {
  require(i < p.K, "gaussian_margin: regime index out of range");
  require(z_prev.size() == p.m, "gaussian_margin: dimension mismatch");
  const std::vector<double> mi = p.transition_mean(i, z_prev);
  const auto ls = std::span<const double>(p.transition_log_sigmas);
  const double own = diag_gaussian_logpdf(mi, mi, ls.subspan(i * p.m, p.m));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.K; ++k) {
    if (k == i) continue;
    const std::vector<double> mk = p.transition_mean(k, z_prev);
    best = std::min(best, own - diag_gaussian_logpdf(mi, mk, ls.subspan(k * p.m, p.m)));
  }
  return best;
}

/// Equal isotropic variance form: min_k ||m_i - m_k||^2 / (2 sigma^2).
inline double isotropic_margin(const RmsmParams& p, std::span<const double> z_prev, std::size_t i, double sigma2) {
  require(i < p.K && sigma2 > 0.0, "isotropic_margin: invalid arguments");
  const std::vector<double> mi = p.transition_mean(i, z_prev);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.K; ++k) {
    if (k == i) continue;
    const std::vector<double> mk = p.transition_mean(k, z_prev);
    double d2 = 0.0;
    for (std::size_t j = 0; j < p.m; ++j) d2 += (mi[j] - mk[j]) * (mi[j] - mk[j]);
    best = std::min(best, d2 / (2.0 * sigma2));
  }
  return best;
}

struct DominanceReport {
  double margin = 0.0;       // l*
  double stickiness = 0.0;   // eps*
  double initial_odds = 0.0; // R1
  double a = 0.0;            // contraction rate e^{-l*} / (1 - eps*)
  double b = 0.0;            // e^{-l*} eps* / (1 - eps*)
  double floor = 0.0;        // R_inf = b / (1 - a)
  bool reachable = false;    // l* > log((1 + eps*) / (1 - eps*))
  std::size_t horizon = 0;   // T*, valid when reachable
  bool premise_violated = false;  // R1 <= R_inf: T* = 2 reported without the closed form
  bool one_step = false;     // l* > log((R1 + eps*) / (1 - eps*))
};

/// Closed-form horizon after which the filtered posterior of the aligned
/// regime exceeds 1/2, given initial odds R1, margin l* and stickiness eps*.
inline DominanceReport dominance_horizon(double R1, double margin, double stickiness) {
  require(R1 > 0.0 && std::isfinite(R1), "dominance_horizon: R1 must be positive and finite");
  require(margin > 0.0, "dominance_horizon: margin must be positive");
  require(stickiness >= 0.0 && stickiness < 0.5, "dominance_horizon: stickiness must be in [0, 1/2)");
  DominanceReport r;
  r.margin = margin;
  r.stickiness = stickiness;
  r.initial_odds = R1;
  const double e = std::exp(-margin);
  r.a = e / (1.0 - stickiness);
  r.b = e * stickiness / (1.0 - stickiness);
  r.one_step = margin > std::log((R1 + stickiness) / (1.0 - stickiness));
  r.reachable = margin > std::log((1.0 + stickiness) / (1.0 - stickiness));
  if (!r.reachable) {
    r.floor = r.a < 1.0 ? r.b / (1.0 - r.a) : std::numeric_limits<double>::infinity();
    return r;
  }
  r.floor = r.b / (1.0 - r.a);
  if (R1 <= r.floor) {
    r.premise_violated = true;
    r.horizon = 2;
    return r;
  }
  const double steps = std::floor(std::log((1.0 - r.floor) / (R1 - r.floor)) / std::log(r.a));
  r.horizon = static_cast<std::size_t>(std::max(2.0, 2.0 + steps));
  return r;
}

/// Initial odds against the aligned regime under a uniform prior.
inline double uniform_initial_odds(std::size_t K) {
  require(K >= 1, "uniform_initial_odds: K must be positive");
  return static_cast<double>(K - 1);
}

/// Filtered posterior p(s_t = s*_t | z_{0:t}) of the history's own regime
/// labels at every step.
inline std::vector<double> simulate_dominance(const RmsmParams& p, const LatentPath& history) {
  require(static_cast<std::size_t>(history.z.rows()) == history.s.size(), "simulate_dominance: lengths differ");
  require(static_cast<std::size_t>(history.z.cols()) == p.m, "simulate_dominance: latent dimension mismatch");
  LocalTerms lt;
  compute_local_terms(p, history.z, lt);
  const PosteriorTables tables = forward_backward(lt);
  std::vector<double> post(history.s.size());
  for (std::size_t t = 0; t < post.size(); ++t) {
    require(history.s[t] < p.K, "simulate_dominance: regime label out of range");
    post[t] = std::exp(tables.log_alpha(static_cast<Eigen::Index>(t), history.s[t]));
  }
  return post;
}

// ---------------------------------------------------------------------------
// Assumption checks

/// Pairwise ratio matrix: row (k1 < k2) holds sigma_{k1,i} / sigma_{k2,i}.
struct RatioMatrix {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  Eigen::MatrixXd R;

  /// Smallest max-norm distance between two columns (+inf for one column).
  double min_column_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < R.cols(); ++i)
      for (Eigen::Index j = i + 1; j < R.cols(); ++j) best = std::min(best, (R.col(i) - R.col(j)).cwiseAbs().maxCoeff());
    return best;
  }
};

inline RatioMatrix ratio_matrix(const std::vector<double>& sigmas, std::size_t K, std::size_t m) {
  require(sigmas.size() == K * m, "ratio_matrix: expected K x m standard deviations");
  for (double s : sigmas) require(s > 0.0, "ratio_matrix: standard deviations must be positive");
  RatioMatrix r;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) r.pairs.emplace_back(a, b);
  r.R.resize(static_cast<Eigen::Index>(r.pairs.size()), static_cast<Eigen::Index>(m));
  for (std::size_t row = 0; row < r.pairs.size(); ++row)
    for (std::size_t i = 0; i < m; ++i)
      r.R(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(i)) =
          sigmas[r.pairs[row].first * m + i] / sigmas[r.pairs[row].second * m + i];
  return r;
}

inline RatioMatrix ratio_matrix(const RmsmParams& p) {
  std::vector<double> sigmas(p.K * p.m);
  for (std::size_t i = 0; i < sigmas.size(); ++i) sigmas[i] = std::exp(p.transition_log_sigmas[i]);
  return ratio_matrix(sigmas, p.K, p.m);
}

struct AssumptionReport {
  // sticky switching
  double min_self_transition = 1.0;
  double implied_stickiness = 0.0;  // 1 - min_self_transition
  // per-regime weak variance dominance in some dimension
  std::vector<bool> variance_dominance;
  std::vector<std::size_t> dominant_dimension;  // witness (m when none)
  // Jacobian nondegeneracy
  double max_abs_jacobian_det = 0.0;
  std::size_t jacobian_regime = 0;
  std::vector<double> jacobian_point;
  // ratio matrix
  RatioMatrix ratios;
  double min_column_distance = 0.0;
  bool distinct_columns = false;
  double column_tolerance = 0.0;
};

inline AssumptionReport check_assumptions(const RmsmParams& p, const std::vector<std::vector<double>>& probes,
                                          double column_tolerance = 1e-9) {
  require(!probes.empty(), "check_assumptions: need at least one probe point");
  p.validate();
  AssumptionReport r;
  for (const auto& z : probes) {
    require(z.size() == p.m, "check_assumptions: probe point has wrong dimension");
    const RowMatrix q = switch_matrix(p, z);
    for (std::size_t k = 0; k < p.K; ++k)
      r.min_self_transition = std::min(r.min_self_transition, q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < p.K; ++k) {
      Eigen::MatrixXd J = p.transition_nets[k].jacobian(z);
      if (p.residual) J += Eigen::MatrixXd::Identity(J.rows(), J.cols());
      const double det = std::abs(J.determinant());
      if (det > r.max_abs_jacobian_det || r.jacobian_point.empty()) {
        r.max_abs_jacobian_det = std::max(det, r.max_abs_jacobian_det);
        if (det >= r.max_abs_jacobian_det) {
          r.jacobian_regime = k;
          r.jacobian_point = z;
        }
      }
    }
  }
  r.implied_stickiness = 1.0 - r.min_self_transition;
  for (std::size_t k = 0; k < p.K; ++k) {
    std::size_t witness = p.m;
    for (std::size_t i = 0; i < p.m && witness == p.m; ++i) {
      bool dominates = true;
      for (std::size_t k2 = 0; k2 < p.K; ++k2)
        if (p.transition_log_sigmas[k * p.m + i] < p.transition_log_sigmas[k2 * p.m + i]) dominates = false;
      if (dominates) witness = i;
    }
    r.variance_dominance.push_back(witness < p.m);
    r.dominant_dimension.push_back(witness);
  }
  r.ratios = ratio_matrix(p);
  r.min_column_distance = r.ratios.R.rows() == 0 ? 0.0 : r.ratios.min_column_distance();
  r.column_tolerance = column_tolerance;
  r.distinct_columns = r.ratios.R.rows() > 0 && r.min_column_distance > column_tolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Disentanglement

struct DisentangleResult {
  Eigen::MatrixXd basis;    // U: common eigenbasis, U^T Sigma_k U diagonal for every k
  Eigen::MatrixXd A_prime;  // U^{-T}
  std::vector<std::vector<std::size_t>> blocks;  // recovered coordinates with equal ratio vectors
  bool full = false;        // every block is a single coordinate
  Eigen::MatrixXd ratios;   // (K choose 2) x m estimated variance ratios per recovered coordinate
  std::pair<std::size_t, std::size_t> primary_pair{0, 1};
  double residual = 0.0;    // max_k ||offdiag(U^T Sigma_k U)||_F / ||diag(U^T Sigma_k U)||
};

namespace detail {

inline bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

/// Splits sorted values into runs of relatively equal entries.
inline std::vector<std::vector<std::size_t>> group_sorted(const Eigen::VectorXd& vals, double tol) {
  std::vector<std::vector<std::size_t>> groups;
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (groups.empty() || !close_rel(vals(i), vals(i - 1), tol)) groups.emplace_back();
    groups.back().push_back(static_cast<std::size_t>(i));
  }
  return groups;
}

inline double min_gap(const Eigen::VectorXd& vals) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 1; i < vals.size(); ++i)
    best = std::min(best, std::abs(vals(i) - vals(i - 1)) / std::max(std::abs(vals(i)), std::abs(vals(i - 1))));
  return best;
}

}  // namespace detail

/// Finds U with U^T S_k U diagonal for all k from covariances S_k = A D_k A^T.
/// One generalized eigenproblem (pair with the best-separated eigenvalues)
/// fixes U up to mixing inside groups of equal eigenvalues; each group is
/// then refined by restricted generalized eigenproblems over the remaining
/// pairs. Groups no pair can split are reported as blocks.
inline DisentangleResult recover_disentanglement(const std::vector<Eigen::MatrixXd>& covs, double tolerance = 1e-6,
                                                 double max_residual = 1e-6) {
  require(covs.size() >= 2, "recover_disentanglement: need at least two covariance matrices");
  const Eigen::Index m = covs.front().rows();
  for (const auto& c : covs) {
    require(c.rows() == m && c.cols() == m, "recover_disentanglement: covariance shapes differ");
    require((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, c.cwiseAbs().maxCoeff()),
            "recover_disentanglement: covariance is not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    require(llt.info() == Eigen::Success, "recover_disentanglement: covariance is not positive definite");
  }
  const std::size_t K = covs.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) pairs.emplace_back(a, b);

  DisentangleResult r;
  double best_gap = -1.0;
  Eigen::MatrixXd U;
  Eigen::VectorXd vals;
  for (const auto& pr : pairs) {
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(covs[pr.first], covs[pr.second]);
    const double gap = m > 1 ? detail::min_gap(ges.eigenvalues()) : 1.0;
    if (gap > best_gap) {
      best_gap = gap;
      U = ges.eigenvectors();
      vals = ges.eigenvalues();
      r.primary_pair = pr;
    }
  }

  std::vector<std::vector<std::size_t>> pending = detail::group_sorted(vals, tolerance);
  std::vector<std::vector<std::size_t>> final_groups;
  while (!pending.empty()) {
    std::vector<std::size_t> g = pending.back();
    pending.pop_back();
    if (g.size() == 1) {
      final_groups.push_back(g);
      continue;
    }
    bool split = false;
    for (const auto& pr : pairs) {
      Eigen::MatrixXd Ug(m, static_cast<Eigen::Index>(g.size()));
      for (std::size_t j = 0; j < g.size(); ++j) Ug.col(static_cast<Eigen::Index>(j)) = U.col(static_cast<Eigen::Index>(g[j]));
      const Eigen::MatrixXd Ma = Ug.transpose() * covs[pr.first] * Ug;
      const Eigen::MatrixXd Mb = Ug.transpose() * covs[pr.second] * Ug;
      Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(Ma, Mb);
      const auto sub = detail::group_sorted(ges.eigenvalues(), tolerance);
      if (sub.size() == 1) continue;
      const Eigen::MatrixXd rotated = Ug * ges.eigenvectors();
      for (std::size_t j = 0; j < g.size(); ++j) U.col(static_cast<Eigen::Index>(g[j])) = rotated.col(static_cast<Eigen::Index>(j));
      for (const auto& s : sub) {
        std::vector<std::size_t> child;
        for (std::size_t idx : s) child.push_back(g[idx]);
        pending.push_back(child);
      }
      split = true;
      break;
    }
    if (!split) final_groups.push_back(g);
  }
  std::sort(final_groups.begin(), final_groups.end());

  // Normalise columns against the first covariance so U^T S_0 U = I.
  for (Eigen::Index j = 0; j < m; ++j) {
    const double s = U.col(j).dot(covs[0] * U.col(j));
    U.col(j) /= std::sqrt(s);
  }
  r.basis = U;
  r.A_prime = U.transpose().inverse();
  r.blocks = final_groups;
  r.full = std::all_of(final_groups.begin(), final_groups.end(), [](const auto& g) { return g.size() == 1; });

  r.ratios.resize(static_cast<Eigen::Index>(pairs.size()), m);
  std::vector<Eigen::VectorXd> diag(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Eigen::MatrixXd D = U.transpose() * covs[k] * U;
    diag[k] = D.diagonal();
    const Eigen::MatrixXd off = D - Eigen::MatrixXd(D.diagonal().asDiagonal());
    r.residual = std::max(r.residual, off.norm() / D.diagonal().norm());
  }
  for (std::size_t row = 0; row < pairs.size(); ++row)
    r.ratios.row(static_cast<Eigen::Index>(row)) = diag[pairs[row].first].cwiseQuotient(diag[pairs[row].second]).transpose();
  if (r.residual > max_residual)
    throw NumericalError("recover_disentanglement: joint diagonalisation residual " + std::to_string(r.residual) +
                         " exceeds tolerance " + std::to_string(max_residual));
  return r;
}

/// S = (A')^{-1} A = U^T A, read against the recovered blocks.
struct MixingFactor {
  Eigen::MatrixXd S;
  std::vector<std::size_t> column_of_row;  // full case: support of each row
  Eigen::VectorXd scale;                   // full case: D entries
  std::vector<std::vector<std::size_t>> block_columns;  // columns owned by each recovered block
  double off_pattern = 0.0;                // ||S outside the pattern||_F / ||S||_F
  bool single_support = false;             // every row and column has exactly one entry above tolerance
};

inline MixingFactor factor_mixing(const DisentangleResult& res, const Eigen::MatrixXd& A, double tolerance = 1e-6) {
  require(A.rows() == res.basis.rows() && A.cols() == res.basis.cols(), "factor_mixing: shape mismatch");
  MixingFactor f;
  f.S = res.basis.transpose() * A;
  const Eigen::Index m = f.S.rows();
  const double norm = f.S.norm();
  Eigen::MatrixXd pattern = Eigen::MatrixXd::Zero(m, m);
  std::vector<bool> taken(static_cast<std::size_t>(m), false);
  for (const auto& g : res.blocks) {
    // columns with the largest mass over the block's rows
    std::vector<std::pair<double, std::size_t>> mass;
    for (Eigen::Index c = 0; c < m; ++c) {
      if (taken[static_cast<std::size_t>(c)]) continue;
      double s = 0.0;
      for (std::size_t row : g) s += f.S(static_cast<Eigen::Index>(row), c) * f.S(static_cast<Eigen::Index>(row), c);
      mass.emplace_back(s, static_cast<std::size_t>(c));
    }
    std::sort(mass.begin(), mass.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < g.size() && j < mass.size(); ++j) {
      cols.push_back(mass[j].second);
      taken[mass[j].second] = true;
    }
    std::sort(cols.begin(), cols.end());
    for (std::size_t row : g)
      for (std::size_t c : cols) pattern(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(c)) = 1.0;
    f.block_columns.push_back(cols);
  }
  f.off_pattern = (f.S.array() * (1.0 - pattern.array())).matrix().norm() / norm;
  if (res.full) {
    f.column_of_row.assign(static_cast<std::size_t>(m), 0);
    f.scale.resize(m);
    for (std::size_t b = 0; b < res.blocks.size(); ++b) {
      const std::size_t row = res.blocks[b][0];
      f.column_of_row[row] = f.block_columns[b][0];
      f.scale(static_cast<Eigen::Index>(row)) = f.S(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(f.block_columns[b][0]));
    }
  }
  const double thr = tolerance * norm;
  bool single = true;
  for (Eigen::Index i = 0; i < m; ++i) {
    if ((f.S.row(i).array().abs() > thr).count() != 1) single = false;
    if ((f.S.col(i).array().abs() > thr).count() != 1) single = false;
  }
  f.single_support = single;
  return f;
}

}  // namespace rsds

#endif  // RSDS_THEORY_HPP
