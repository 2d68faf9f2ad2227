#include <gtest/gtest.h>

#include <numbers>

#include "rsds/datagen.hpp"
#include "rsds/theory.hpp"
#include "test_support.hpp"

using namespace rsds;
using namespace rsds::testing;

namespace {

constexpr double kPi = std::numbers::pi;

/// First t >= 2 with R_t < 1 under R_t = a R_{t-1} + b; 0 if none within the cap.
std::size_t odds_recursion(double R1, double margin, double eps, std::size_t cap = 100000) {
  const double a = std::exp(-margin) / (1.0 - eps);
  const double b = std::exp(-margin) * eps / (1.0 - eps);
  double R = R1;
  for (std::size_t t = 2; t <= cap; ++t) {
    R = a * R + b;
    if (R < 1.0) return t;
  }
  return 0;
}

Eigen::MatrixXd random_mixing_matrix(std::size_t m, Rng& rng) {
  // singular values in [1, 10] keep the condition number at most 10
  const Eigen::MatrixXd U = random_orthogonal(m, rng), V = random_orthogonal(m, rng);
  Eigen::VectorXd s(static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = rng.uniform(1.0, 10.0);
  s(0) = 1.0;
  return U * s.asDiagonal() * V.transpose();
}

}  // namespace

TEST(Margin, CosineEndpointOneGivesFive) {
  const RmsmParams p = cosine_toy_params(0.1, 0.1);
  const double pred[3] = {0.0, kPi / 2.0, -kPi / 2.0};
  for (std::size_t k = 0; k < 3; ++k) {
    const std::vector<double> z{pred[k]};
    EXPECT_NEAR(p.transition_nets[k](z)[0], 1.0, 1e-12);
    EXPECT_NEAR(gaussian_margin(p, z, k), 5.0, 0.01) << "regime " << k + 1;
  }
}

TEST(Margin, CosineEndpointHalfGivesPointSixSeven) {
  const RmsmParams p = cosine_toy_params(0.1, 0.1);
  const double pred[3] = {kPi / 3.0, kPi / 6.0, -kPi / 6.0};
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 3; ++k) {
    const std::vector<double> z{pred[k]};
    EXPECT_NEAR(p.transition_nets[k](z)[0], 0.5, 1e-12);
    worst = std::min(worst, gaussian_margin(p, z, k));
  }
  EXPECT_NEAR(worst, 0.669, 0.01);
}

TEST(Margin, IsotropicFormMatchesGeneralForm) {
  Rng rng(3);
  RmsmParams p = random_rmsm(3, 2, false, rng);
  p.transition_log_sigmas.assign(6, 0.5 * std::log(0.2));
  const std::vector<double> z{0.3, -0.1};
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(gaussian_margin(p, z, k), isotropic_margin(p, z, k, 0.2), 1e-12);
}

TEST(Margin, SingleRegimeIsInfinite) {
  Rng rng(1);
  const RmsmParams p = random_rmsm(1, 1, false, rng);
  EXPECT_TRUE(std::isinf(gaussian_margin(p, std::vector<double>{0.0}, 0)));
}

TEST(Dominance, OneStepFlagsForCosineExample) {
  const double R1 = uniform_initial_odds(3);
  for (double eps : {0.0, 0.1, 0.25, 0.4, 0.499}) {
    const DominanceReport strong = dominance_horizon(R1, 5.0, eps);
    EXPECT_TRUE(strong.one_step) << "eps " << eps;
    EXPECT_EQ(strong.horizon, 2u);
    EXPECT_FALSE(dominance_horizon(R1, 0.67, eps).one_step) << "eps " << eps;
  }
}

TEST(Dominance, ClosedFormAgreesWithOddsRecursion) {
  Rng rng(17);
  int checked = 0;
  for (int i = 0; i < 2000; ++i) {
    const double eps = rng.uniform(0.0, 0.45);
    const double margin = rng.uniform(0.05, 6.0);
    const double R1 = std::exp(rng.uniform(-3.0, 6.0));
    const DominanceReport r = dominance_horizon(R1, margin, eps);
    if (!r.reachable) {
      EXPECT_LE(margin, std::log((1.0 + eps) / (1.0 - eps)) + 1e-12);
      continue;
    }
    const std::size_t oracle = odds_recursion(R1, margin, eps);
    ASSERT_GT(oracle, 0u);
    EXPECT_EQ(r.horizon, oracle) << "R1=" << R1 << " l=" << margin << " eps=" << eps;
    ++checked;
  }
  EXPECT_GT(checked, 500);
}

TEST(Dominance, UnreachableAndPremiseFlags) {
  EXPECT_FALSE(dominance_horizon(2.0, 0.1, 0.2).reachable);
  const DominanceReport r = dominance_horizon(1e-6, 3.0, 0.3);
  EXPECT_TRUE(r.premise_violated);
  EXPECT_EQ(r.horizon, 2u);
}

TEST(Dominance, FilterCrossesHalfByHorizon) {
  Rng rng(9);
  RmsmParams p = random_rmsm(3, 1, false, rng);
  p.transition_log_sigmas.assign(3, std::log(0.05));
  const double eps = 0.1;
  std::vector<double> logits(9);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t k = 0; k < 3; ++k) logits[l * 3 + k] = std::log(l == k ? 1.0 - eps : eps / 2.0);
  p.switching = AutonomousSwitch{logits};
  LatentPath h{RowMatrix(12, 1), std::vector<std::uint32_t>(12, 1)};
  h.z(0, 0) = 0.2;
  for (Eigen::Index t = 1; t < 12; ++t) h.z(t, 0) = p.transition_nets[1](row_span(h.z, t - 1))[0];
  double margin = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 1; t < 12; ++t) margin = std::min(margin, gaussian_margin(p, row_span(h.z, t - 1), 1));
  const std::vector<double> post = simulate_dominance(p, h);
  const double R1 = (1.0 - post[0]) / post[0];
  if (margin <= std::log((1.0 + eps) / (1.0 - eps))) GTEST_SKIP() << "random means too close for this seed";
  const DominanceReport r = dominance_horizon(R1, margin, eps);
  ASSERT_LE(r.horizon, 12u);
  for (std::size_t t = r.horizon - 1; t < 12; ++t) EXPECT_GT(post[t], 0.5) << "t=" << t;
}

TEST(Assumptions, RatioVectorExample) {
  // sigma_1 = (1, 1/2, 1/4), sigma_2 = (1, 1/4, 1/2) -> ratio vector (1, 2, 1/2)
  const RatioMatrix R = ratio_matrix({1.0, 0.5, 0.25, 1.0, 0.25, 0.5}, 2, 3);
  ASSERT_EQ(R.R.rows(), 1);
  EXPECT_DOUBLE_EQ(R.R(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(R.R(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(R.R(0, 2), 0.5);
  EXPECT_GT(R.min_column_distance(), 0.0);
}

TEST(Assumptions, EqualColumnsAreDetected) {
  const RatioMatrix R = ratio_matrix({1.0, 0.25, 0.25, 1.0, 0.25, 0.5}, 2, 3);
  EXPECT_DOUBLE_EQ(R.min_column_distance(), 0.0);  // dims 1 and 2 share ratio 1
}

TEST(Assumptions, ReportOnCosineToy) {
  const RmsmParams p = cosine_toy_params(0.1, 0.2);
  const AssumptionReport a = check_assumptions(p, {{0.0}, {0.5}, {1.0}});
  EXPECT_NEAR(a.min_self_transition, 0.8, 1e-12);
  EXPECT_NEAR(a.implied_stickiness, 0.2, 1e-12);
  // equal variances: every regime weakly dominates
  for (bool b : a.variance_dominance) EXPECT_TRUE(b);
  // |d/dz cos(z + c)| is at most 1, reached at z = 0 for the shifted means
  EXPECT_NEAR(a.max_abs_jacobian_det, 1.0, 1e-12);
  EXPECT_TRUE(a.distinct_columns);  // m = 1: a single column is trivially distinct
  EXPECT_TRUE(std::isinf(a.min_column_distance));
}

TEST(Disentangle, RecoversPermutationTimesDiagonal) {
  Rng rng(23);
  for (std::size_t m : {3u, 4u, 6u}) {
    for (int rep = 0; rep < 3; ++rep) {
      const Eigen::MatrixXd A = random_mixing_matrix(m, rng);
      std::vector<Eigen::MatrixXd> covs;
      for (int k = 0; k < 3; ++k) {
        Eigen::VectorXd d(static_cast<Eigen::Index>(m));
        for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = rng.uniform(0.1, 2.0);
        covs.push_back(A * d.cwiseAbs2().asDiagonal() * A.transpose());
      }
      const DisentangleResult r = recover_disentanglement(covs);
      EXPECT_TRUE(r.full);
      const MixingFactor f = factor_mixing(r, A);
      EXPECT_TRUE(f.single_support);
      EXPECT_LE(f.off_pattern, 1e-6);
    }
  }
}

TEST(Disentangle, EqualRatioGroupsBecomeBlocks) {
  Rng rng(5);
  const Eigen::MatrixXd A = random_mixing_matrix(3, rng);
  // dims 0 and 1 share every variance ratio; dim 2 differs
  const std::vector<Eigen::Vector3d> sd = {{1.0, 0.5, 0.25}, {2.0, 1.0, 0.25}, {0.5, 0.25, 1.0}};
  std::vector<Eigen::MatrixXd> covs;
  for (const auto& s : sd) covs.push_back(A * s.cwiseAbs2().asDiagonal() * A.transpose());
  const DisentangleResult r = recover_disentanglement(covs);
  EXPECT_FALSE(r.full);
  ASSERT_EQ(r.blocks.size(), 2u);
  const MixingFactor f = factor_mixing(r, A);
  EXPECT_LE(f.off_pattern, 1e-6);
  std::vector<std::size_t> sizes;
  for (const auto& cols : f.block_columns) sizes.push_back(cols.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{1, 2}));
  for (std::size_t b = 0; b < r.blocks.size(); ++b)
    if (f.block_columns[b].size() == 2) EXPECT_EQ(f.block_columns[b], (std::vector<std::size_t>{0, 1}));
}

TEST(Disentangle, SecondPairResolvesRemainingBlock) {
  Rng rng(6);
  const Eigen::MatrixXd A = random_mixing_matrix(3, rng);
  // pair (1,2) separates {0,1} from {2}; pair (2,3) separates {0} from {1,2}
  const std::vector<Eigen::Vector3d> sd = {{1.0, 1.0, 0.5}, {1.0, 1.0, 1.0}, {2.0, 1.0, 1.0}};
  std::vector<Eigen::MatrixXd> covs;
  for (const auto& s : sd) covs.push_back(A * s.cwiseAbs2().asDiagonal() * A.transpose());
  const DisentangleResult r = recover_disentanglement(covs);
  EXPECT_TRUE(r.full);
  EXPECT_TRUE(factor_mixing(r, A).single_support);
}

TEST(Disentangle, RejectsIndefiniteAndInconsistentInputs) {
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -1.0;
  EXPECT_THROW(recover_disentanglement({Eigen::MatrixXd::Identity(2, 2), bad}), ContractViolation);
  Rng rng(1);
  std::vector<Eigen::MatrixXd> covs;
  for (int k = 0; k < 3; ++k) {
    const Eigen::MatrixXd G = Eigen::MatrixXd::Random(3, 3);
    covs.push_back(G * G.transpose() + Eigen::MatrixXd::Identity(3, 3));
  }
  EXPECT_THROW(recover_disentanglement(covs), NumericalError);
}
