#include <gtest/gtest.h>

#include "rsds/nnet.hpp"
#include "test_support.hpp"

using namespace rsds;
using rsds::testing::central_difference;
using rsds::testing::close;

namespace {

// Scalar loss L = c . net(x) with fixed random c.
struct Probe {
  Mlp net;
  std::vector<double> x;
  std::vector<double> c;
  double loss() const {
    const auto y = net(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += c[i] * y[i];
    return acc;
  }
};

Probe make_probe(Activation act, std::uint64_t seed) {
  Rng rng(seed);
  Probe p{make_random_mlp({3, 6, 5, 2}, act, rng), {}, {}};
  for (int i = 0; i < 3; ++i) p.x.push_back(rng.normal());
  for (int i = 0; i < 2; ++i) p.c.push_back(rng.normal());
  return p;
}

}  // namespace

class MlpGradient : public ::testing::TestWithParam<Activation> {};

TEST_P(MlpGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Probe p = make_probe(GetParam(), seed);
    MlpTape tape;
    p.net.forward(p.x, tape);
    Mlp grads = p.net.zeros_like();
    const auto dx = p.net.backward(tape, p.c, &grads);
    auto f = [&] { return p.loss(); };
    for (std::size_t l = 0; l < p.net.num_layers(); ++l) {
      auto& layer = p.net.layer(l);
      for (std::size_t i = 0; i < layer.weight.size(); ++i) {
        const double fd = central_difference(layer.weight[i], f);
        EXPECT_TRUE(close(grads.layer(l).weight[i], fd, 1e-5, 1e-8))
            << "layer " << l << " weight " << i << ": " << grads.layer(l).weight[i] << " vs " << fd;
      }
      for (std::size_t i = 0; i < layer.bias.size(); ++i) {
        const double fd = central_difference(layer.bias[i], f);
        EXPECT_TRUE(close(grads.layer(l).bias[i], fd, 1e-5, 1e-8)) << "layer " << l << " bias " << i;
      }
    }
    for (std::size_t i = 0; i < p.x.size(); ++i) {
      const double fd = central_difference(p.x[i], f);
      EXPECT_TRUE(close(dx[i], fd, 1e-5, 1e-8)) << "input " << i;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllActivations, MlpGradient,
                         ::testing::Values(Activation::Cosine, Activation::LeakyRelu, Activation::Gelu,
                                           Activation::Identity));

TEST(Mlp, GradientsAccumulateAcrossCalls) {
  Probe p = make_probe(Activation::Gelu, 7);
  MlpTape tape;
  p.net.forward(p.x, tape);
  Mlp once = p.net.zeros_like(), twice = p.net.zeros_like();
  p.net.backward(tape, p.c, &once);
  p.net.backward(tape, p.c, &twice);
  p.net.backward(tape, p.c, &twice);
  for (std::size_t l = 0; l < p.net.num_layers(); ++l)
    for (std::size_t i = 0; i < once.layer(l).weight.size(); ++i)
      EXPECT_DOUBLE_EQ(twice.layer(l).weight[i], 2.0 * once.layer(l).weight[i]);
}

TEST(Mlp, JacobianMatchesFiniteDifferences) {
  Rng rng(0);
  const Mlp net = make_random_mlp({3, 8, 3}, Activation::Cosine, rng);
  std::vector<double> x(3, 0.0);
  const Eigen::MatrixXd J = net.jacobian(x);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t o = 0; o < 3; ++o) {
      const double fd = central_difference(x[i], [&] { return net(x)[o]; }, 1e-6);
      EXPECT_NEAR(J(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)), fd, 1e-6);
    }
  }
}

TEST(Mlp, SeededInitIsDeterministicAndBounded) {
  Rng a(42), b(42);
  const Mlp na = make_random_mlp({4, 9, 2}, Activation::LeakyRelu, a);
  const Mlp nb = make_random_mlp({4, 9, 2}, Activation::LeakyRelu, b);
  EXPECT_TRUE(na == nb);
  const std::vector<double> x{0.1, -0.2, 0.3, 0.4};
  EXPECT_EQ(na(x), nb(x));
  for (const auto& layer : na.layers()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (double w : layer.weight) EXPECT_LE(std::abs(w), bound);
  }
}

TEST(Mlp, MaskedWeightsStayZeroAndGetNoGradient) {
  Rng rng(3);
  Mlp net = make_random_mlp({2, 3, 2}, Activation::Cosine, rng);
  net.set_mask(0, {1, 0, 0, 1, 1, 1});
  EXPECT_EQ(net.layer(0).weight[1], 0.0);
  EXPECT_EQ(net.layer(0).weight[2], 0.0);
  MlpTape tape;
  const std::vector<double> x{0.5, -1.0}, c{1.0, 2.0};
  net.forward(x, tape);
  Mlp g = net.zeros_like();
  net.backward(tape, c, &g);
  EXPECT_EQ(g.layer(0).weight[1], 0.0);
  EXPECT_EQ(g.layer(0).weight[2], 0.0);
  EXPECT_NE(g.layer(0).weight[0], 0.0);
}

TEST(Mlp, RejectsWrongInputLength) {
  Rng rng(0);
  const Mlp net = make_random_mlp({3, 2}, Activation::Identity, rng);
  EXPECT_THROW(net(std::vector<double>{1.0, 2.0}), ContractViolation);
}

TEST(Mlp, ActivationNamesRoundTrip) {
  for (Activation a : {Activation::Cosine, Activation::LeakyRelu, Activation::Gelu, Activation::Identity})
    EXPECT_EQ(activation_from_string(to_string(a)), a);
}
