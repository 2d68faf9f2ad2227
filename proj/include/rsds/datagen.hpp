#ifndef RSDS_DATAGEN_HPP
#define RSDS_DATAGEN_HPP

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "rsds/dataset.hpp"
#include "rsds/error.hpp"
#include "rsds/nnet.hpp"
#include "rsds/rmsm.hpp"
#include "rsds/rng.hpp"

namespace rsds {

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Stream index for parameter draws; sequence streams use 0..N-1.
inline constexpr std::uint64_t kParamStream = 0xFFFFFFFF00000001ULL;

}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Regime count used for each latent dimension of the benchmark.
inline std::size_t default_regimes(std::size_t m) {
  switch (m) {
    case 3: return 3;
    case 5: return 3;
    case 10: return 4;
    case 20: return 5;
    default: return 3;
  }
}

/// Minimal required spread of ratio values for one regime pair.
inline double default_ratio_threshold(std::size_t m) {
  switch (m) {
    case 3: return 0.35;
    case 5: return 0.35;
    case 10: return 0.10;
    case 20: return 0.05;
    default: return m < 10 ? 0.35 : 0.05;
  }
}

struct SyntheticSpec {
  std::size_t m = 3;
  std::size_t K = 0;  // 0: default_regimes(m)
  std::size_t n = 0;  // 0: n = m; otherwise m or 5m
  std::size_t T = 100;
  std::size_t T_test = 0;  // 0: same as T
  std::size_t n_train = 10000;
  std::size_t n_test = 1000;
  double stay = 0.9;
  double avg_parents = 3.0;
  std::size_t hidden_per_output = 16;
  double sigma_lo = 0.001;
  double sigma_hi = 0.5;
  double ratio_threshold = -1.0;  // < 0: default_ratio_threshold(m)
  double noise_sd = 0.1;          // appended noise dims when n = 5m
  double initial_sd = 0.1;
  bool identity_emission = false;
  double emission_max_cond = 10.0;  // 0: no conditioning constraint
  std::uint64_t seed = 0;

  std::size_t regimes() const { return K ? K : default_regimes(m); }
  std::size_t test_length() const { return T_test ? T_test : T; }
  std::size_t obs_dim() const { return n ? n : m; }
  double threshold() const { return ratio_threshold >= 0.0 ? ratio_threshold : default_ratio_threshold(m); }

  void validate() const {
    require(m >= 1 && regimes() >= 1 && T >= 1, "SyntheticSpec: m, K and T must be positive");
    require(obs_dim() == m || obs_dim() == 5 * m, "SyntheticSpec: n must equal m or 5m");
    require(n_train + n_test >= 1, "SyntheticSpec: need at least one sequence");
    require(stay > 0.0 && stay <= 1.0, "SyntheticSpec: stay probability must be in (0, 1]");
    require(sigma_lo > 0.0 && sigma_hi > sigma_lo, "SyntheticSpec: invalid sigma range");
    require(hidden_per_output >= 1 && avg_parents > 0.0, "SyntheticSpec: invalid transition net shape");
    require(emission_max_cond == 0.0 || emission_max_cond >= 1.0, "SyntheticSpec: emission_max_cond must be 0 or >= 1");
  }
};

/// Two-layer leaky-rectifier emission n -> n -> n. Each weight matrix is
/// redrawn until, with rows scaled to unit norm, its condition number is at
/// most max_cond (0 accepts the first draw).
inline Mlp make_emission_net(std::size_t n, double max_cond, Rng& rng) {
  Mlp net({n, n, n}, Activation::LeakyRelu);
  net.init_uniform(rng);
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (std::size_t attempt = 0;; ++attempt) {
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          layer.weight.data(), static_cast<Eigen::Index>(layer.out), static_cast<Eigen::Index>(layer.in));
      W = W.rowwise().normalized().eval();
      const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues();
      if (max_cond <= 0.0 || sv(sv.size() - 1) * max_cond >= sv(0)) break;
      if (attempt >= 10000) throw NumericalError("make_emission_net: no draw with condition <= " + detail::num(max_cond));
      for (double& v : layer.weight) v = rng.uniform(-bound, bound);
    }
  }
  return net;
}

/// Invertible observation map x = g(v). An empty net is the identity.
struct Emission {
  Mlp net;
  std::vector<double> operator()(std::span<const double> v) const {
    if (net.empty()) return {v.begin(), v.end()};
    return net(v);
  }
};

struct GeneratedData {
  Dataset train;
  Dataset test;
  RmsmParams truth;
  Emission emission;
};

/// Smallest gap between distinct entries of a pair's ratio vector
/// sigma_{k1,i} / sigma_{k2,i}.
inline double ratio_spread(const std::vector<double>& sigmas, std::size_t m, std::size_t k1, std::size_t k2) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double ri = sigmas[k1 * m + i] / sigmas[k2 * m + i];
      const double rj = sigmas[k1 * m + j] / sigmas[k2 * m + j];
      best = std::min(best, std::abs(ri - rj));
    }
  return best;
}

/// Largest ratio spread over regime pairs.
inline double best_ratio_spread(const std::vector<double>& sigmas, std::size_t K, std::size_t m) {
  double best = 0.0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = a + 1; b < K; ++b) best = std::max(best, ratio_spread(sigmas, m, a, b));
  return best;
}

/// Locally connected cosine network m -> m: output i owns a block of
/// `hidden` units that read only from a random parent set of z.
inline Mlp make_local_cosine_net(std::size_t m, std::size_t hidden, double avg_parents, Rng& rng) {
  Mlp net({m, hidden * m, m}, Activation::Cosine);
  const double p = std::min(1.0, avg_parents / static_cast<double>(m));
  std::vector<std::uint8_t> m1(hidden * m * m, 0), m2(m * hidden * m, 0);
  std::vector<std::size_t> fan1(hidden * m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<std::size_t> parents;
    for (std::size_t j = 0; j < m; ++j)
      if (rng.uniform() < p) parents.push_back(j);
    if (parents.empty()) parents.push_back(rng.index(m));
    for (std::size_t h = 0; h < hidden; ++h) {
      const std::size_t unit = i * hidden + h;
      for (std::size_t j : parents) m1[unit * m + j] = 1;
      fan1[unit] = parents.size();
      m2[i * hidden * m + unit] = 1;
    }
  }
  auto& l1 = net.layer(0);
  auto& l2 = net.layer(1);
  for (std::size_t u = 0; u < hidden * m; ++u) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan1[u]));
    for (std::size_t j = 0; j < m; ++j) l1.weight[u * m + j] = rng.uniform(-b, b);
    l1.bias[u] = rng.uniform(-b, b);
  }
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (double& w : l2.weight) w = rng.uniform(-b2, b2);
  for (double& w : l2.bias) w = rng.uniform(-b2, b2);
  net.set_mask(0, std::move(m1));
  net.set_mask(1, std::move(m2));
  return net;
}

/// Autonomous logits: stay on the diagonal, 1 - stay on the cyclic next regime.
inline std::vector<double> cyclic_sticky_logits(std::size_t K, double stay) {
  std::vector<double> logits(K * K, kLogFloor);
  if (K == 1) {
    logits[0] = 0.0;
    return logits;
  }
  for (std::size_t k = 0; k < K; ++k) {
    logits[k * K + k] = std::log(stay);
    logits[k * K + (k + 1) % K] = stay < 1.0 ? std::log(1.0 - stay) : kLogFloor;
  }
  return logits;
}

namespace detail {

inline Dataset sample_dataset(const RmsmParams& truth, const Emission& emission, std::size_t n, std::size_t T,
                              std::size_t first, std::size_t count, double noise_sd, std::uint64_t seed) {
  Dataset d;
  d.n = n;
  d.m = truth.m;
  d.K = truth.K;
  const std::size_t m = truth.m;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(stream_seed(seed, first + i));
    const LatentPath path = sample_path(truth, T, rng);
    RowMatrix x(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(n));
    std::vector<double> v(n);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < m; ++j) v[j] = path.z(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
      for (std::size_t j = m; j < n; ++j) v[j] = rng.normal(0.0, noise_sd);
      const std::vector<double> xt = emission(v);
      for (std::size_t j = 0; j < n; ++j) x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = xt[j];
    }
    d.x.push_back(std::move(x));
    d.z.push_back(path.z);
    d.s.push_back(path.s);
  }
  return d;
}

}  // namespace detail

inline GeneratedData gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t m = spec.m, K = spec.regimes(), n = spec.obs_dim();
  Rng rng(stream_seed(spec.seed, detail::kParamStream));

  RmsmParams truth;
  truth.K = K;
  truth.m = m;
  truth.initial_logits.assign(K, 0.0);
  truth.initial_means.resize(K * m);
  for (double& v : truth.initial_means) v = rng.uniform(-1.0, 1.0);
  truth.initial_log_sigmas.assign(K * m, std::log(spec.initial_sd));
  for (std::size_t k = 0; k < K; ++k)
    truth.transition_nets.push_back(make_local_cosine_net(m, spec.hidden_per_output, spec.avg_parents, rng));

  std::vector<double> sigmas(K * m);
  const double threshold = spec.threshold();
  std::size_t attempts = 0;
  for (;;) {
    for (double& s : sigmas) s = rng.uniform(spec.sigma_lo, spec.sigma_hi);
    if (K < 2 || m < 2 || best_ratio_spread(sigmas, K, m) > threshold) break;
    if (++attempts >= 1000)
      throw NumericalError("gen_synthetic: ratio spread threshold " + detail::num(threshold) +
                           " not met after 1000 draws; use a looser threshold");
  }
  truth.transition_log_sigmas.resize(K * m);
  for (std::size_t i = 0; i < K * m; ++i) truth.transition_log_sigmas[i] = std::log(sigmas[i]);
  truth.switching = AutonomousSwitch{cyclic_sticky_logits(K, spec.stay)};
  truth.validate();

  Emission emission;
  if (!spec.identity_emission) {
    emission.net = make_emission_net(n, spec.emission_max_cond, rng);
  }

  GeneratedData out;
  out.truth = truth;
  out.emission = emission;
  out.train = detail::sample_dataset(truth, emission, n, spec.T, 0, spec.n_train, spec.noise_sd, spec.seed);
  out.test = detail::sample_dataset(truth, emission, n, spec.test_length(), spec.n_train, spec.n_test, spec.noise_sd, spec.seed);
  std::map<std::string, std::string> meta{
      {"generator", "synthetic"},
      {"seed", std::to_string(spec.seed)},
      {"m", std::to_string(m)},
      {"K", std::to_string(K)},
      {"n", std::to_string(n)},
      {"T", std::to_string(spec.T)},
      {"stay", detail::num(spec.stay)},
      {"next_regime", "cyclic"},
      {"avg_parents", detail::num(spec.avg_parents)},
      {"hidden_per_output", std::to_string(spec.hidden_per_output)},
      {"transition_activation", "cosine"},
      {"sigma_range", detail::num(spec.sigma_lo) + "," + detail::num(spec.sigma_hi)},
      {"ratio_threshold", detail::num(threshold)},
      {"ratio_spread", detail::num(K >= 2 && m >= 2 ? best_ratio_spread(sigmas, K, m) : 0.0)},
      {"noise_sd", detail::num(spec.noise_sd)},
      {"emission", spec.identity_emission ? "identity" : "leaky_relu_mlp"},
      {"leaky_slope", detail::num(kLeakySlope)},
      {"emission_max_cond", detail::num(spec.emission_max_cond)},
      {"prng", "mt19937_64+splitmix64_streams"},
  };
  out.train.metadata = meta;
  out.train.metadata["split"] = "train";
  out.test.metadata = meta;
  out.test.metadata["split"] = "test";
  out.test.metadata["T"] = std::to_string(spec.test_length());
  return out;
}

// ---------------------------------------------------------------------------
// Cosine toy

/// Offsets of the three cosine means: m_1 = cos z, m_2 = cos(z - pi/2),
/// m_3 = cos(z + pi/2).
inline constexpr double kCosineOffsets[3] = {0.0, -std::numbers::pi / 2.0, std::numbers::pi / 2.0};

inline Mlp make_cosine_mean(double offset) {
  Mlp net({1, 1, 1}, Activation::Cosine);
  net.layer(0).weight[0] = 1.0;
  net.layer(0).bias[0] = offset;
  net.layer(1).weight[0] = 1.0;
  return net;
}

/// One-dimensional, three-regime rMSM with cosine means and equal variance.
inline RmsmParams cosine_toy_params(double sigma2, double stickiness) {
  require(sigma2 > 0.0, "cosine_toy_params: sigma2 must be positive");
  require(stickiness >= 0.0 && stickiness < 1.0, "cosine_toy_params: stickiness must be in [0, 1)");
  RmsmParams p;
  p.K = 3;
  p.m = 1;
  p.initial_logits.assign(3, 0.0);
  p.initial_means.assign(3, 0.0);
  p.initial_log_sigmas.assign(3, 0.5 * std::log(sigma2));
  p.transition_log_sigmas.assign(3, 0.5 * std::log(sigma2));
  for (double off : kCosineOffsets) p.transition_nets.push_back(make_cosine_mean(off));
  std::vector<double> logits(9);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t k = 0; k < 3; ++k) {
      const double prob = l == k ? 1.0 - stickiness : stickiness / 2.0;
      logits[l * 3 + k] = prob > 0.0 ? std::log(prob) : kLogFloor;
    }
  p.switching = AutonomousSwitch{logits};
  return p;
}

struct CosineToy {
  Dataset data;
  RmsmParams truth;
};

inline CosineToy gen_cosine_toy(double sigma2, std::size_t T, std::size_t N, double stickiness, std::uint64_t seed) {
  CosineToy out{{}, cosine_toy_params(sigma2, stickiness)};
  out.data = detail::sample_dataset(out.truth, Emission{}, 1, T, 0, N, 0.0, seed);
  out.data.metadata = {{"generator", "cosine_toy"},      {"seed", std::to_string(seed)},
                       {"sigma2", detail::num(sigma2)}, {"stickiness", detail::num(stickiness)},
                       {"T", std::to_string(T)},        {"emission", "identity"},
                       {"offsets", "0,-pi/2,+pi/2"}};
  return out;
}

// ---------------------------------------------------------------------------
// Bouncing ball (state space)

struct BouncingBallSpec {
  double box = 1.0;
  double speed = 0.05;
  std::size_t T = 64;
  std::size_t T_test = 0;  // 0: same as T
  std::size_t N = 2000;
  std::size_t n_test = 0;
  double process_noise = 0.005;
  double gain = 1000.0;  // logit gain of the ground-truth switching layer
  bool emission_net = false;
  std::uint64_t seed = 0;

  std::size_t test_length() const { return T_test ? T_test : T; }
};

/// Regime k moves with velocity (sx, sy) * speed, sx = -1 iff bit 0 of k is
/// set and sy = -1 iff bit 1 is set: 0 = up-right, 1 = up-left,
/// 2 = down-right, 3 = down-left.
inline double ball_velocity(std::size_t k, std::size_t axis, double speed) {
  return ((k >> axis) & 1u) ? -speed : speed;
}

/// Regime after a wall check from position z with regime k.
inline std::size_t ball_next_regime(std::span<const double> z, std::size_t k, double box, double speed) {
  std::size_t next = k;
  for (std::size_t c = 0; c < 2; ++c) {
    const double moved = z[c] + ball_velocity(k, c, speed);
    if (moved > box + 1e-9 || moved < -1e-9) next ^= (1u << c);
  }
  return next;
}

/// Ground truth: identity-plus-velocity means and a linear switching layer
/// whose logits favour exactly the wall flips the dynamics perform.
inline RmsmParams bouncing_ball_params(const BouncingBallSpec& spec) {
  RmsmParams p;
  p.K = 4;
  p.m = 2;
  p.initial_logits.assign(4, 0.0);
  p.initial_means.assign(8, 0.5 * spec.box);
  p.initial_log_sigmas.assign(8, std::log(spec.box / std::sqrt(12.0)));
  p.transition_log_sigmas.assign(8, std::log(std::max(spec.process_noise, 1e-6)));
  for (std::size_t k = 0; k < 4; ++k) {
    Mlp net({2, 2}, Activation::Identity);
    net.layer(0).weight = {1.0, 0.0, 0.0, 1.0};
    net.layer(0).bias = {ball_velocity(k, 0, spec.speed), ball_velocity(k, 1, spec.speed)};
    p.transition_nets.push_back(std::move(net));
  }
  Mlp q({2, 16}, Activation::Identity);
  auto& layer = q.layer(0);
  for (std::size_t l = 0; l < 4; ++l)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t out = l * 4 + k;
      for (std::size_t c = 0; c < 2; ++c) {
        // a_c(z) > 0 exactly when moving regime l along axis c crosses a wall
        const bool positive = ball_velocity(l, c, 1.0) > 0.0;
        const double sign = positive ? 1.0 : -1.0;
        const double thr = positive ? spec.box - spec.speed : spec.speed;
        const double e = (((l ^ k) >> c) & 1u) ? 1.0 : -1.0;
        layer.weight[out * 2 + c] += spec.gain * e * sign;
        layer.bias[out] += -spec.gain * e * sign * thr;
      }
    }
  p.switching = RecurrentSwitch{std::move(q)};
  return p;
}

struct BouncingBall {
  Dataset data;
  Dataset test;
  RmsmParams truth;
  Emission emission;
};

namespace detail {

inline LatentPath ball_path(const BouncingBallSpec& spec, Rng& rng) {
  LatentPath path{RowMatrix(static_cast<Eigen::Index>(spec.T), 2), std::vector<std::uint32_t>(spec.T)};
  std::size_t k = rng.index(4);
  path.z(0, 0) = rng.uniform(0.0, spec.box);
  path.z(0, 1) = rng.uniform(0.0, spec.box);
  path.s[0] = static_cast<std::uint32_t>(k);
  for (std::size_t t = 1; t < spec.T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    k = ball_next_regime(row_span(path.z, ti - 1), k, spec.box, spec.speed);
    path.s[t] = static_cast<std::uint32_t>(k);
    for (std::size_t c = 0; c < 2; ++c) {
      const double noise = spec.process_noise > 0.0 ? rng.normal(0.0, spec.process_noise) : 0.0;
      path.z(ti, static_cast<Eigen::Index>(c)) =
          path.z(ti - 1, static_cast<Eigen::Index>(c)) + ball_velocity(k, c, spec.speed) + noise;
    }
  }
  return path;
}

}  // namespace detail

/// Noiseless rollout from position z0 in regime k0.
inline LatentPath ball_rollout(const BouncingBallSpec& spec, std::span<const double> z0, std::size_t k0) {
  LatentPath path{RowMatrix(static_cast<Eigen::Index>(spec.T), 2), std::vector<std::uint32_t>(spec.T)};
  path.z(0, 0) = z0[0];
  path.z(0, 1) = z0[1];
  path.s[0] = static_cast<std::uint32_t>(k0);
  std::size_t k = k0;
  for (std::size_t t = 1; t < spec.T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    k = ball_next_regime(row_span(path.z, ti - 1), k, spec.box, spec.speed);
    path.s[t] = static_cast<std::uint32_t>(k);
    for (std::size_t c = 0; c < 2; ++c)
      path.z(ti, static_cast<Eigen::Index>(c)) = path.z(ti - 1, static_cast<Eigen::Index>(c)) + ball_velocity(k, c, spec.speed);
  }
  return path;
}

inline BouncingBall gen_bouncing_ball_state(const BouncingBallSpec& spec) {
  require(spec.box > 0.0, "gen_bouncing_ball_state: box size must be positive");
  require(spec.speed >= 0.0 && spec.speed < spec.box, "gen_bouncing_ball_state: speed must be in [0, box)");
  require(spec.T >= 1 && spec.N + spec.n_test >= 1, "gen_bouncing_ball_state: need T >= 1 and N >= 1");
  BouncingBall out;
  out.truth = bouncing_ball_params(spec);
  Rng prng(stream_seed(spec.seed, detail::kParamStream));
  if (spec.emission_net) {
    out.emission.net = make_emission_net(2, 10.0, prng);
  }
  BouncingBallSpec test_spec = spec;
  test_spec.T = spec.test_length();
  auto build = [&](const BouncingBallSpec& sp, std::size_t first, std::size_t count) {
    Dataset d;
    d.n = 2;
    d.m = 2;
    d.K = 4;
    for (std::size_t i = 0; i < count; ++i) {
      Rng rng(stream_seed(spec.seed, first + i));
      LatentPath path = detail::ball_path(sp, rng);
      RowMatrix x(path.z.rows(), 2);
      for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const std::vector<double> xt = out.emission(row_span(path.z, t));
        x(t, 0) = xt[0];
        x(t, 1) = xt[1];
      }
      d.x.push_back(std::move(x));
      d.z.push_back(std::move(path.z));
      d.s.push_back(std::move(path.s));
    }
    d.metadata = {{"generator", "bouncing_ball"},
                  {"seed", std::to_string(spec.seed)},
                  {"box", detail::num(spec.box)},
                  {"speed", detail::num(spec.speed)},
                  {"T", std::to_string(sp.T)},
                  {"process_noise", detail::num(spec.process_noise)},
                  {"regimes", "0=up-right,1=up-left,2=down-right,3=down-left"},
                  {"emission", spec.emission_net ? "leaky_relu_mlp" : "identity"},
                  {"prng", "mt19937_64+splitmix64_streams"}};
    return d;
  };
  out.data = build(spec, 0, spec.N);
  out.data.metadata["split"] = "train";
  out.test = build(test_spec, spec.N, spec.n_test);
  out.test.metadata["split"] = "test";
  return out;
}

}  // namespace rsds

#endif  // RSDS_DATAGEN_HPP
