#ifndef RSDS_TEST_SUPPORT_HPP
#define RSDS_TEST_SUPPORT_HPP

// Independent oracles shared by the unit and acceptance tests.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rsds/rmsm.hpp"
#include "rsds/trainer.hpp"

namespace rsds::testing {

/// |a - b| <= max(rel * max(|a|, |b|), floor).
inline bool close(double a, double b, double rel, double floor) {
  return std::abs(a - b) <= std::max(rel * std::max(std::abs(a), std::abs(b)), floor);
}

/// Central difference of f with respect to v[i], restoring v[i] afterwards.
inline double central_difference(double& v, const std::function<double()>& f, double h = 1e-5) {
  const double saved = v;
  v = saved + h;
  const double up = f();
  v = saved - h;
  const double down = f();
  v = saved;
  return (up - down) / (2.0 * h);
}

inline RmsmParams random_rmsm(std::size_t K, std::size_t m, bool recurrent, Rng& rng,
                              Activation act = Activation::Cosine) {
  RmsmParams p = make_rmsm(K, m, {4}, act, recurrent, {5}, Activation::Gelu);
  for (auto& net : p.transition_nets) net.init_uniform(rng);
  if (auto* r = std::get_if<RecurrentSwitch>(&p.switching)) r->net.init_uniform(rng);
  if (auto* a = std::get_if<AutonomousSwitch>(&p.switching))
    for (double& v : a->logits) v = rng.normal();
  for (double& v : p.initial_logits) v = rng.normal();
  for (double& v : p.initial_means) v = rng.normal();
  for (double& v : p.initial_log_sigmas) v = rng.uniform(-1.0, 0.3);
  for (double& v : p.transition_log_sigmas) v = rng.uniform(-1.0, 0.3);
  return p;
}

inline RowMatrix random_path(std::size_t T, std::size_t m, Rng& rng, double scale = 1.0) {
  RowMatrix z(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(m));
  for (Eigen::Index t = 0; t < z.rows(); ++t)
    for (Eigen::Index i = 0; i < z.cols(); ++i) z(t, i) = scale * rng.normal();
  return z;
}

/// Exact posterior quantities by enumerating all K^T regime paths, built
/// from the model's densities directly (no shared recursion code).
struct BruteForce {
  double loglik = 0.0;
  RowMatrix gamma;                // T x K
  std::vector<RowMatrix> xi;      // T-1 of K x K, xi[t-1](k, l) = p(s_t = k, s_{t-1} = l)
};

inline BruteForce brute_force(const RmsmParams& p, const RowMatrix& z) {
  const std::size_t T = static_cast<std::size_t>(z.rows());
  const std::size_t K = p.K;
  std::vector<double> log_init(K);
  {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : p.initial_logits) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : p.initial_logits) s += std::exp(v - mx);
    for (std::size_t k = 0; k < K; ++k) log_init[k] = p.initial_logits[k] - mx - std::log(s);
  }
  std::vector<RowMatrix> Q;
  for (std::size_t t = 1; t < T; ++t) Q.push_back(switch_matrix(p, row_span(z, static_cast<Eigen::Index>(t - 1))));
  std::vector<std::vector<double>> obs(T, std::vector<double>(K));
  for (std::size_t k = 0; k < K; ++k) {
    obs[0][k] = initial_logpdf(p, row_span(z, 0), k);
    for (std::size_t t = 1; t < T; ++t)
      obs[t][k] = transition_logpdf(p, row_span(z, static_cast<Eigen::Index>(t - 1)), row_span(z, static_cast<Eigen::Index>(t)), k);
  }
  std::size_t paths = 1;
  for (std::size_t t = 0; t < T; ++t) paths *= K;
  std::vector<double> lj(paths);
  std::vector<std::vector<std::size_t>> states(paths, std::vector<std::size_t>(T));
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t idx = 0; idx < paths; ++idx) {
    std::size_t rem = idx;
    for (std::size_t t = 0; t < T; ++t) {
      states[idx][t] = rem % K;
      rem /= K;
    }
    const auto& s = states[idx];
    double v = log_init[s[0]] + obs[0][s[0]];
    for (std::size_t t = 1; t < T; ++t)
      v += std::log(Q[t - 1](static_cast<Eigen::Index>(s[t - 1]), static_cast<Eigen::Index>(s[t]))) + obs[t][s[t]];
    lj[idx] = v;
    mx = std::max(mx, v);
  }
  double total = 0.0;
  for (double v : lj) total += std::exp(v - mx);
  BruteForce b;
  b.loglik = mx + std::log(total);
  b.gamma = RowMatrix::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(K));
  b.xi.assign(T > 0 ? T - 1 : 0, RowMatrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K)));
  for (std::size_t idx = 0; idx < paths; ++idx) {
    const double w = std::exp(lj[idx] - b.loglik);
    const auto& s = states[idx];
    for (std::size_t t = 0; t < T; ++t) b.gamma(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s[t])) += w;
    for (std::size_t t = 1; t < T; ++t)
      b.xi[t - 1](static_cast<Eigen::Index>(s[t]), static_cast<Eigen::Index>(s[t - 1])) += w;
  }
  return b;
}

/// Small random model (flow + prior) for joint gradient checks.
inline Model random_model(std::size_t n, std::size_t m, std::size_t K, Rng& rng, bool recurrent = true) {
  FlowArchitecture arch;
  arch.depth = 3;
  arch.coupling_hidden = {5};
  arch.coupling_activation = Activation::Gelu;
  Model model{make_flow(n, m, arch, rng), random_rmsm(K, m, recurrent, rng), 0.7};
  // Couplings start at the identity; perturb so every parameter matters.
  for_each_flow_param(model.flow, "", [&](const std::string&, std::span<double> v) {
    for (double& x : v) x += 0.2 * rng.normal();
  });
  return model;
}

}  // namespace rsds::testing

#endif  // RSDS_TEST_SUPPORT_HPP
