#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <random>

#include "rsds/datagen.hpp"
#include "rsds/dataset.hpp"
#include "rsds/theory.hpp"

using namespace rsds;

namespace {

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.n_train = 12;
  s.n_test = 4;
  s.T = 50;
  s.seed = seed;
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rsds_datagen_" + name)).string();
}

double lag1_autocorrelation(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    den += (v[i] - mean) * (v[i] - mean);
    if (i + 1 < v.size()) num += (v[i] - mean) * (v[i + 1] - mean);
  }
  return num / den;
}

std::string hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

}  // namespace

TEST(Synthetic, DefaultRegimeCountsFollowLatentDimension) {
  EXPECT_EQ(default_regimes(3), 3u);
  EXPECT_EQ(default_regimes(5), 3u);
  EXPECT_EQ(default_regimes(10), 4u);
  EXPECT_EQ(default_regimes(20), 5u);
  EXPECT_DOUBLE_EQ(default_ratio_threshold(3), 0.35);
  EXPECT_DOUBLE_EQ(default_ratio_threshold(10), 0.10);
  EXPECT_DOUBLE_EQ(default_ratio_threshold(20), 0.05);
  SyntheticSpec s;
  EXPECT_EQ(s.n_train, 10000u);
  EXPECT_EQ(s.n_test, 1000u);
  EXPECT_EQ(s.T, 100u);
}

TEST(Synthetic, SeededGenerationIsBitIdentical) {
  const GeneratedData a = gen_synthetic(small_spec(4));
  const GeneratedData b = gen_synthetic(small_spec(4));
  EXPECT_EQ(serialize_dataset(a.train), serialize_dataset(b.train));
  EXPECT_EQ(serialize_dataset(a.test), serialize_dataset(b.test));
  EXPECT_NE(serialize_dataset(a.train), serialize_dataset(gen_synthetic(small_spec(5)).train));
}

TEST(Synthetic, ShapesAndNoiseAugmentation) {
  SyntheticSpec s = small_spec(1);
  s.n = 15;
  const GeneratedData g = gen_synthetic(s);
  EXPECT_EQ(g.train.n, 15u);
  EXPECT_EQ(g.train.m, 3u);
  EXPECT_EQ(g.train.K, 3u);
  EXPECT_EQ(g.train.size(), 12u);
  EXPECT_EQ(g.test.size(), 4u);
  g.train.validate();
  s.n = 7;
  EXPECT_THROW(gen_synthetic(s), ContractViolation);
}

TEST(Synthetic, TransitionNetsAreSparse) {
  SyntheticSpec s = small_spec(2);
  s.m = 10;
  const GeneratedData g = gen_synthetic(s);
  // each output reads from its own parent set: the Jacobian has zero entries
  std::size_t zeros = 0;
  const Eigen::MatrixXd J = g.truth.transition_nets[0].jacobian(std::vector<double>(10, 0.1));
  for (Eigen::Index i = 0; i < J.size(); ++i) zeros += J.data()[i] == 0.0;
  EXPECT_GT(zeros, 30u);
}

TEST(Synthetic, SwitchingIsStickyAndCyclic) {
  const GeneratedData g = gen_synthetic(small_spec(3));
  const RowMatrix q = switch_matrix(g.truth, std::vector<double>(3, 0.0));
  for (Eigen::Index k = 0; k < 3; ++k) {
    EXPECT_NEAR(q(k, k), 0.9, 1e-12);
    EXPECT_NEAR(q(k, (k + 1) % 3), 0.1, 1e-12);
  }
}

TEST(Synthetic, GroundTruthRegimesAreRecoverable) {
  SyntheticSpec s = small_spec(6);
  s.n_train = 20;
  s.T = 100;
  const GeneratedData g = gen_synthetic(s);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < g.train.size(); ++i) {
    const auto s_hat = argmax_regimes(forward_backward(g.truth, g.train.z[i]).gamma);
    for (std::size_t t = 0; t < s_hat.size(); ++t, ++total) hit += s_hat[t] == g.train.s[i][t];
  }
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.95);
}

TEST(Synthetic, DefaultsPassRatioAssumption) {
  for (std::size_t m : {3u, 5u, 10u}) {
    SyntheticSpec s = small_spec(11);
    s.m = m;
    s.n_train = 1;
    s.n_test = 0;
    const GeneratedData g = gen_synthetic(s);
    const AssumptionReport r = check_assumptions(g.truth, {std::vector<double>(m, 0.0)}, s.threshold());
    EXPECT_TRUE(r.distinct_columns) << "m=" << m << " spread " << r.min_column_distance;
  }
}

TEST(Synthetic, ImpossibleThresholdIsReported) {
  SyntheticSpec s = small_spec(0);
  s.ratio_threshold = 1e6;
  try {
    gen_synthetic(s);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("looser threshold"), std::string::npos);
  }
}

TEST(Synthetic, SingleRegimeAutocorrelationMatchesTransitionNet) {
  SyntheticSpec s = small_spec(8);
  s.K = 1;
  s.identity_emission = true;
  s.n_train = 40;
  s.n_test = 0;
  s.T = 500;
  const GeneratedData g = gen_synthetic(s);
  // independent long-run simulation of z' = f(z) + sigma * noise
  std::mt19937_64 eng(123);
  std::normal_distribution<double> nd;
  std::vector<double> z(3), sim;
  for (std::size_t j = 0; j < 3; ++j) z[j] = g.truth.initial_means[j];
  for (int t = 0; t < 200000; ++t) {
    const auto mean = g.truth.transition_nets[0](z);
    for (std::size_t j = 0; j < 3; ++j) z[j] = mean[j] + std::exp(g.truth.transition_log_sigmas[j]) * nd(eng);
    if (t >= 1000) sim.push_back(z[0]);
  }
  std::vector<double> data;
  for (const auto& x : g.train.x)
    for (Eigen::Index t = 100; t < x.rows(); ++t) data.push_back(x(t, 0));
  EXPECT_NEAR(lag1_autocorrelation(data), lag1_autocorrelation(sim), 0.05);
}

TEST(Cosine, MeansFollowShiftedCosines) {
  const RmsmParams p = cosine_toy_params(0.1, 0.1);
  const std::vector<double> zero{0.0}, half_pi{std::numbers::pi / 2.0};
  EXPECT_NEAR(p.transition_nets[1](zero)[0], 0.0, 1e-15);
  EXPECT_NEAR(p.transition_nets[0](half_pi)[0], 0.0, 1e-15);
  EXPECT_NEAR(p.transition_nets[1](half_pi)[0], 1.0, 1e-15);
  EXPECT_NEAR(p.transition_nets[2](half_pi)[0], -1.0, 1e-15);
  EXPECT_NEAR(std::exp(2.0 * p.transition_log_sigmas[0]), 0.1, 1e-15);
}

TEST(Cosine, GeneratedParamsHaveMarginFiveAtZero) {
  const CosineToy toy = gen_cosine_toy(0.1, 20, 3, 0.1, 0);
  EXPECT_NEAR(gaussian_margin(toy.truth, std::vector<double>{0.0}, 0), 5.0, 0.01);
  EXPECT_EQ(toy.data.size(), 3u);
  EXPECT_EQ(toy.data.n, 1u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(toy.data.x[i] == toy.data.z[i]);
}

TEST(Ball, ConstantVelocityUntilTheWall) {
  BouncingBallSpec spec;
  spec.speed = 0.1;
  spec.T = 12;
  const std::vector<double> centre{0.5, 0.5};
  const LatentPath path = ball_rollout(spec, centre, 0);
  // five steps of +0.1 reach the corner; the next step flips both components
  for (Eigen::Index t = 0; t <= 5; ++t) {
    EXPECT_NEAR(path.z(t, 0), 0.5 + 0.1 * static_cast<double>(t), 1e-12);
    EXPECT_NEAR(path.z(t, 1), 0.5 + 0.1 * static_cast<double>(t), 1e-12);
    EXPECT_EQ(path.s[static_cast<std::size_t>(t)], 0u);
  }
  EXPECT_EQ(path.s[6], 3u);
  EXPECT_NEAR(path.z(6, 0), 0.9, 1e-12);
}

TEST(Ball, SingleWallFlipsOneComponent) {
  BouncingBallSpec spec;
  spec.speed = 0.1;
  spec.T = 8;
  const std::vector<double> start{0.75, 0.2};
  const LatentPath path = ball_rollout(spec, start, 0);
  // the move out of x = 0.95 would cross the right wall; y is far from both walls
  EXPECT_EQ(path.s[2], 0u);
  EXPECT_EQ(path.s[3], 1u);
  EXPECT_NEAR(path.z(3, 1), 0.5, 1e-12);
  for (Eigen::Index t = 0; t < path.z.rows(); ++t) EXPECT_LE(path.z(t, 0), 1.0 + 1e-12);
}

TEST(Ball, TransitionsAreWallFlipsOnly) {
  BouncingBallSpec spec;
  spec.N = 20;
  spec.T = 200;
  spec.seed = 3;
  const BouncingBall b = gen_bouncing_ball_state(spec);
  EXPECT_EQ(b.data.K, 4u);
  EXPECT_EQ(b.data.m, 2u);
  EXPECT_EQ(b.data.n, 2u);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < b.data.size(); ++i) {
    const auto& s = b.data.s[i];
    for (std::size_t t = 1; t < s.size(); ++t)
      for (std::size_t c = 0; c < 2; ++c) {
        if (!(((s[t] ^ s[t - 1]) >> c) & 1u)) continue;
        ++flips;
        // a component flips only when the previous position is within one step of a wall
        const double pos = b.data.z[i](static_cast<Eigen::Index>(t - 1), static_cast<Eigen::Index>(c));
        EXPECT_LE(std::min(pos, spec.box - pos), spec.speed + 1e-9) << "seq " << i << " t " << t;
      }
  }
  EXPECT_GT(flips, 20u);
}

TEST(Ball, ZeroSpeedKeepsRegime) {
  BouncingBallSpec spec;
  spec.speed = 0.0;
  spec.N = 5;
  spec.T = 30;
  const BouncingBall b = gen_bouncing_ball_state(spec);
  for (const auto& s : b.data.s)
    for (auto v : s) EXPECT_EQ(v, s.front());
}

TEST(Ball, GroundTruthSwitchingMatchesKinematics) {
  BouncingBallSpec spec;
  spec.N = 10;
  spec.T = 100;
  spec.seed = 1;
  const BouncingBall b = gen_bouncing_ball_state(spec);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < b.data.size(); ++i)
    for (Eigen::Index t = 1; t < b.data.z[i].rows(); ++t, ++total) {
      const RowMatrix q = switch_matrix(b.truth, row_span(b.data.z[i], t - 1));
      const auto prev = static_cast<Eigen::Index>(b.data.s[i][static_cast<std::size_t>(t - 1)]);
      const auto next = static_cast<Eigen::Index>(b.data.s[i][static_cast<std::size_t>(t)]);
      hit += q(prev, next) > 0.5;
    }
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.99);
}

TEST(DatasetIo, RoundTripIsExact) {
  const GeneratedData g = gen_synthetic(small_spec(9));
  const std::string path = temp_path("rt.rsds");
  write_dataset(path, g.train);
  const Dataset back = read_dataset(path);
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(g.train));
  EXPECT_EQ(back.metadata, g.train.metadata);
  EXPECT_TRUE(std::filesystem::exists(path + ".txt"));
}

TEST(DatasetIo, MatchesReferenceHexFixture) {
  Dataset d;
  d.n = 1;
  RowMatrix x(2, 1);
  x << 1.0, 2.0;
  d.x.push_back(x);
  d.metadata["a"] = "b";
  const std::string expected =
      "52534453"            // magic
      "0100" "00"           // version, flags
      "01000000" "02000000" "01000000" "00000000" "00000000"  // N T n m K
      "000000000000f03f" "0000000000000040"                   // x
      "0400000000000000" "613d620a";                          // metadata
  EXPECT_EQ(hex(serialize_dataset(d)), expected);
  const std::string path = temp_path("fixture.rsds");
  detail::write_file(path, serialize_dataset(d));
  const DatasetHeader h = read_dataset_header(path);
  EXPECT_EQ(h.N, 1u);
  EXPECT_EQ(h.T, 2u);
  EXPECT_EQ(h.n, 1u);
  EXPECT_FALSE(h.has_z());
}

TEST(DatasetIo, TruncationNamesMissingSection) {
  const GeneratedData g = gen_synthetic(small_spec(9));
  const std::string bytes = serialize_dataset(g.train);
  auto message = [&](std::size_t keep) {
    try {
      deserialize_dataset(bytes.substr(0, keep));
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(10).find("header field"), std::string::npos);
  EXPECT_NE(message(100).find("observation payload"), std::string::npos);
  EXPECT_NE(message(bytes.size() - 3).find("metadata"), std::string::npos);
  EXPECT_NE(message(100).find("byte offset"), std::string::npos);
}

TEST(DatasetIo, BadMagicAndLabels) {
  EXPECT_THROW(deserialize_dataset("XXXX\x01\x00"), ParseError);
  Dataset d;
  d.n = 1;
  d.K = 2;
  d.x.push_back(RowMatrix::Zero(2, 1));
  d.s.push_back({0, 1});
  std::string bytes = serialize_dataset(d);
  bytes[27 + 16 + 4] = 9;  // second label
  EXPECT_THROW(deserialize_dataset(bytes), ParseError);
}
