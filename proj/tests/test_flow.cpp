#include <gtest/gtest.h>

#include "rsds/flow.hpp"
#include "test_support.hpp"

using namespace rsds;
using namespace rsds::testing;

namespace {

FlowStack perturbed_flow(std::size_t n, std::size_t m, std::size_t depth, MixingKind mixing, Rng& rng) {
  FlowArchitecture arch;
  arch.depth = depth;
  arch.coupling_hidden = {8};
  arch.mixing = mixing;
  FlowStack f = make_flow(n, m, arch, rng);
  // shrink with n so the perturbed LU factors stay well conditioned
  const double scale = 0.3 * std::min(1.0, 2.0 / std::sqrt(static_cast<double>(n)));
  for_each_flow_param(f, "", [&](const std::string&, std::span<double> v) {
    for (double& x : v) x += scale * rng.normal();
  });
  return f;
}

std::vector<double> random_point(std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  return x;
}

/// log|det| of the central-difference Jacobian of the forward map.
double numerical_logdet(const FlowStack& f, std::vector<double> v) {
  const std::size_t n = v.size();
  Eigen::MatrixXd J(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    const double h = 1e-6, saved = v[j];
    v[j] = saved + h;
    const auto up = f.forward(v);
    v[j] = saved - h;
    const auto down = f.forward(v);
    v[j] = saved;
    for (std::size_t i = 0; i < n; ++i)
      J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (up[i] - down[i]) / (2.0 * h);
  }
  return std::log(std::abs(J.determinant()));
}

}  // namespace

TEST(Flow, RoundTripIsIdentity) {
  Rng rng(1);
  for (std::size_t n : {1u, 2u, 5u, 16u, 64u}) {
    for (MixingKind mix : {MixingKind::Lu, MixingKind::Permutation}) {
      const FlowStack f = perturbed_flow(n, std::max<std::size_t>(1, n / 2), 8, mix, rng);
      double worst = 0.0, worst_ld = 0.0;
      for (int i = 0; i < 1000; ++i) {
        const auto x = random_point(n, rng);
        double ld_inv = 0.0, ld_fwd = 0.0;
        const auto v = f.inverse(x, &ld_inv);
        const auto back = f.forward(v, &ld_fwd);
        for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(back[j] - x[j]));
        worst_ld = std::max(worst_ld, std::abs(ld_inv + ld_fwd));
      }
      EXPECT_LE(worst, 1e-8) << "n=" << n;
      EXPECT_LE(worst_ld, 1e-8) << "n=" << n;
    }
  }
}

TEST(Flow, SingleLayerRoundTrip) {
  Rng rng(8);
  for (std::size_t n : {2u, 7u}) {
    const FlowStack f = perturbed_flow(n, 1, 1, MixingKind::Permutation, rng);
    for (int i = 0; i < 100; ++i) {
      const auto v = random_point(n, rng);
      const auto back = f.inverse(f.forward(v));
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(back[j], v[j], 1e-10);
    }
  }
}

TEST(Flow, LogdetMatchesNumericalJacobian) {
  Rng rng(0);
  for (std::size_t n = 1; n <= 6; ++n) {
    const FlowStack f = perturbed_flow(n, 1, 3, MixingKind::Lu, rng);
    for (int i = 0; i < 5; ++i) {
      const auto v = random_point(n, rng);
      double ld = 0.0;
      f.forward(v, &ld);
      EXPECT_NEAR(ld, numerical_logdet(f, v), 1e-5) << "n=" << n;
    }
  }
}

TEST(Flow, LuFromMatrixReproducesMatrix) {
  Rng rng(3);
  Eigen::MatrixXd W = Eigen::MatrixXd::Random(4, 4) + 2.0 * Eigen::MatrixXd::Identity(4, 4);
  W.row(0).swap(W.row(2));  // force pivoting
  const std::vector<double> b{0.1, -0.2, 0.3, 0.5};
  const LuMixing l = LuMixing::from_matrix(W, b);
  EXPECT_LE((l.matrix() - W).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(l.logdet(), std::log(std::abs(W.determinant())), 1e-12);
  FlowStack f(4, 2);
  f.add(l);
  const auto v = random_point(4, rng);
  const auto x = f.forward(v);
  const Eigen::VectorXd expect = W * Eigen::Map<const Eigen::VectorXd>(v.data(), 4) + Eigen::Map<const Eigen::VectorXd>(b.data(), 4);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x[static_cast<std::size_t>(i)], expect(i), 1e-12);
}

TEST(Flow, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  for (std::size_t n : {2u, 3u, 4u}) {
    FlowStack f = perturbed_flow(n, 1, 4, MixingKind::Lu, rng);
    auto x = random_point(n, rng);
    const auto c = random_point(n, rng);
    const double w = 0.7;
    auto objective = [&] {
      double ld = 0.0;
      const auto v = f.inverse(x, &ld);
      double acc = w * ld;
      for (std::size_t i = 0; i < n; ++i) acc += c[i] * v[i] + 0.5 * v[i] * v[i];
      return acc;
    };
    FlowTape tape;
    double ld = 0.0;
    const auto v = f.inverse(x, &ld, &tape);
    std::vector<double> gv(n);
    for (std::size_t i = 0; i < n; ++i) gv[i] = c[i] + v[i];
    FlowStack grads = f.zeros_like();
    const auto dx = f.backward(tape, gv, w, &grads);
    std::vector<std::span<double>> ps, gs;
    for_each_flow_param(f, "", [&](const std::string&, std::span<double> s) { ps.push_back(s); });
    for_each_flow_param(grads, "", [&](const std::string&, std::span<double> s) { gs.push_back(s); });
    ASSERT_EQ(ps.size(), gs.size());
    for (std::size_t a = 0; a < ps.size(); ++a)
      for (std::size_t i = 0; i < ps[a].size(); ++i) {
        const double fd = central_difference(ps[a][i], objective);
        EXPECT_TRUE(close(gs[a][i], fd, 1e-4, 1e-7)) << "tensor " << a << " entry " << i << ": " << gs[a][i] << " vs " << fd;
      }
    for (std::size_t i = 0; i < n; ++i) EXPECT_TRUE(close(dx[i], central_difference(x[i], objective), 1e-4, 1e-7));
  }
}

TEST(Flow, SplitsLatentAndNoise) {
  Rng rng(2);
  const FlowStack f = perturbed_flow(5, 2, 6, MixingKind::Lu, rng);
  const std::vector<double> z{0.3, -0.4}, eps{0.1, 0.2, -0.3};
  const auto x = flow_forward(f, z, eps);
  const FlowInverse inv = flow_inverse(f, x);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(inv.z[i], z[i], 1e-10);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(inv.eps[i], eps[i], 1e-10);
}

TEST(Flow, RejectsNonFiniteInput) {
  Rng rng(2);
  const FlowStack f = perturbed_flow(3, 1, 2, MixingKind::Lu, rng);
  const std::vector<double> bad{0.0, std::numeric_limits<double>::infinity(), 1.0};
  EXPECT_THROW(flow_inverse(f, bad), ContractViolation);
}

TEST(Flow, IdentityInitialisedCouplingsAreIdentity) {
  Rng rng(4);
  FlowArchitecture arch;
  arch.random_mixing = false;
  const FlowStack f = make_flow(4, 2, arch, rng);
  const auto x = random_point(4, rng);
  double ld = 1.0;
  const auto v = f.inverse(x, &ld);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(v[i], x[i]);
  EXPECT_DOUBLE_EQ(ld, 0.0);
}
