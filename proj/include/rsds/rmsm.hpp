#ifndef RSDS_RMSM_HPP
#define RSDS_RMSM_HPP

// Recurrent Markov switching prior over (z_{1:T}, s_{1:T}):
//   p(s_1) p(z_1 | s_1) prod_t p(z_t | z_{t-1}, s_t) p(s_t | s_{t-1}, z_{t-1})
// with Gaussian autoregressive transitions N(m_k(z_{t-1}), diag(sigma_k^2))
// and switching matrix Q(z_{t-1}) (rows = previous regime).
//
// Indexing is 0-based throughout: regimes 0..K-1, time 0..T-1.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/nnet.hpp"
#include "rsds/rng.hpp"
#include "rsds/types.hpp"

namespace rsds {

/// Switching probabilities that ignore z: row-softmax of fixed K x K logits.
struct AutonomousSwitch {
  std::vector<double> logits;  // K x K row-major, row = previous regime
};

/// Switching probabilities Q(z): one network emitting K*K logits, reshaped
/// row-major and row-softmaxed.
struct RecurrentSwitch {
  Mlp net;  // m -> K*K
};

using Switching = std::variant<AutonomousSwitch, RecurrentSwitch>;

struct RmsmParams {
  std::size_t K = 1;
  std::size_t m = 1;
  std::vector<double> initial_logits;         // K
  std::vector<double> initial_means;          // K x m
  std::vector<double> initial_log_sigmas;     // K x m
  std::vector<Mlp> transition_nets;           // K nets, m -> m
  std::vector<double> transition_log_sigmas;  // K x m
  Switching switching;
  bool residual = false;  // transition mean z_prev + net(z_prev) instead of net(z_prev)

  bool recurrent() const { return std::holds_alternative<RecurrentSwitch>(switching); }

  double transition_sigma(std::size_t k, std::size_t i) const { return std::exp(transition_log_sigmas[k * m + i]); }

  std::vector<double> transition_mean(std::size_t k, std::span<const double> z_prev) const {
    std::vector<double> mean = transition_nets[k](z_prev);
    if (residual)
      for (std::size_t i = 0; i < m; ++i) mean[i] += z_prev[i];
    return mean;
  }

  void validate() const {
    require(K >= 1 && m >= 1, "RmsmParams: K and m must be positive");
    require(initial_logits.size() == K, "RmsmParams: initial_logits must have length K");
    require(initial_means.size() == K * m && initial_log_sigmas.size() == K * m,
            "RmsmParams: initial component arrays must be K x m");
    require(transition_log_sigmas.size() == K * m, "RmsmParams: transition_log_sigmas must be K x m");
    require(transition_nets.size() == K, "RmsmParams: need K transition nets");
    for (const auto& net : transition_nets)
      require(net.in_dim() == m && net.out_dim() == m, "RmsmParams: transition nets must map R^m -> R^m");
    if (const auto* a = std::get_if<AutonomousSwitch>(&switching)) {
      require(a->logits.size() == K * K, "RmsmParams: autonomous logits must be K x K");
    } else {
      const auto& net = std::get<RecurrentSwitch>(switching).net;
      require(net.in_dim() == m && net.out_dim() == K * K, "RmsmParams: switching net must map R^m -> R^(K*K)");
    }
    for (double v : transition_log_sigmas) require(std::isfinite(v), "RmsmParams: non-finite log sigma");
  }

  /// Same architecture, every trainable value zero; used as a gradient buffer.
  RmsmParams zeros_like() const {
    RmsmParams g = *this;
    std::fill(g.initial_logits.begin(), g.initial_logits.end(), 0.0);
    std::fill(g.initial_means.begin(), g.initial_means.end(), 0.0);
    std::fill(g.initial_log_sigmas.begin(), g.initial_log_sigmas.end(), 0.0);
    std::fill(g.transition_log_sigmas.begin(), g.transition_log_sigmas.end(), 0.0);
    for (auto& net : g.transition_nets) net.set_zero();
    if (auto* a = std::get_if<AutonomousSwitch>(&g.switching))
      std::fill(a->logits.begin(), a->logits.end(), 0.0);
    else
      std::get<RecurrentSwitch>(g.switching).net.set_zero();
    return g;
  }
};

/// Visit every trainable tensor as (name, span of values, is_switching).
template <class Params, class F>
void for_each_rmsm_param(Params& p, const std::string& prefix, F&& f) {
  f(prefix + "initial_logits", std::span(p.initial_logits), false);
  f(prefix + "initial_means", std::span(p.initial_means), false);
  f(prefix + "initial_log_sigmas", std::span(p.initial_log_sigmas), false);
  for (std::size_t k = 0; k < p.transition_nets.size(); ++k) {
    auto& layers = p.transition_nets[k].layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + "transition." + std::to_string(k) + ".layer" + std::to_string(l);
      f(base + ".weight", std::span(layers[l].weight), false);
      f(base + ".bias", std::span(layers[l].bias), false);
    }
  }
  f(prefix + "transition_log_sigmas", std::span(p.transition_log_sigmas), false);
  if (auto* a = std::get_if<AutonomousSwitch>(&p.switching)) {
    f(prefix + "switch.logits", std::span(a->logits), true);
  } else {
    auto& layers = std::get<RecurrentSwitch>(p.switching).net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + "switch.layer" + std::to_string(l);
      f(base + ".weight", std::span(layers[l].weight), true);
      f(base + ".bias", std::span(layers[l].bias), true);
    }
  }
}

/// Builds a model with zero parameters: transition nets with the given
/// widths {m, hidden..., m}, and either autonomous logits or a switching
/// network with widths {m, hidden..., K*K}.
inline RmsmParams make_rmsm(std::size_t K, std::size_t m, const std::vector<std::size_t>& transition_hidden,
                            Activation transition_act, bool recurrent,
                            const std::vector<std::size_t>& switch_hidden, Activation switch_act) {
  RmsmParams p;
  p.K = K;
  p.m = m;
  p.initial_logits.assign(K, 0.0);
  p.initial_means.assign(K * m, 0.0);
  p.initial_log_sigmas.assign(K * m, 0.0);
  p.transition_log_sigmas.assign(K * m, 0.0);
  std::vector<std::size_t> tw{m};
  tw.insert(tw.end(), transition_hidden.begin(), transition_hidden.end());
  tw.push_back(m);
  for (std::size_t k = 0; k < K; ++k) p.transition_nets.emplace_back(tw, transition_act);
  if (recurrent) {
    std::vector<std::size_t> sw{m};
    sw.insert(sw.end(), switch_hidden.begin(), switch_hidden.end());
    sw.push_back(K * K);
    p.switching = RecurrentSwitch{Mlp(sw, switch_act)};
  } else {
    p.switching = AutonomousSwitch{std::vector<double>(K * K, 0.0)};
  }
  return p;
}

/// Starts switching near "stay with probability `stay`, else move uniformly".
/// A recurrent network gets the pattern as output bias and its output weights
/// shrunk so Q(z) starts almost constant. K = 1 is left alone.
inline void sticky_switch_init(RmsmParams& p, double stay) {
  require(stay > 0.0 && stay < 1.0, "sticky_switch_init: stay must be in (0, 1)");
  const std::size_t K = p.K;
  if (K < 2) return;
  const double on = std::log(stay), off = std::log((1.0 - stay) / static_cast<double>(K - 1));
  std::vector<double> logits(K * K);
  for (std::size_t l = 0; l < K; ++l)
    for (std::size_t k = 0; k < K; ++k) logits[l * K + k] = l == k ? on : off;
  if (auto* a = std::get_if<AutonomousSwitch>(&p.switching)) {
    a->logits = logits;
  } else {
    auto& last = std::get<RecurrentSwitch>(p.switching).net.layers().back();
    for (double& w : last.weight) w *= 0.1;
    last.bias = logits;
  }
}

// ---------------------------------------------------------------------------
// Local terms

/// Diagonal Gaussian log-density N(x; mean, diag(exp(log_sigma))^2).
inline double diag_gaussian_logpdf(std::span<const double> x, std::span<const double> mean,
                                   std::span<const double> log_sigma) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double sigma = std::exp(log_sigma[i]);
    const double r = (x[i] - mean[i]) / sigma;
    acc += -0.5 * kLog2Pi - log_sigma[i] - 0.5 * r * r;
  }
  return acc;
}

/// Row-stochastic switching matrix at z_prev, in log space (K x K row-major).
inline std::vector<double> log_switch_matrix(const RmsmParams& p, std::span<const double> z_prev,
                                             MlpTape* tape = nullptr) {
  std::vector<double> logits;
  if (const auto* a = std::get_if<AutonomousSwitch>(&p.switching)) {
    logits = a->logits;
  } else {
    const auto& net = std::get<RecurrentSwitch>(p.switching).net;
    if (tape)
      logits = net.forward(z_prev, *tape);
    else
      logits = net(z_prev);
  }
  for (std::size_t j = 0; j < p.K; ++j) {
    std::span<double> row(logits.data() + j * p.K, p.K);
    log_softmax(row);
    for (double& v : row) v = std::max(v, kLogFloor);
  }
  return logits;
}

/// Q(z_prev) as probabilities.
inline RowMatrix switch_matrix(const RmsmParams& p, std::span<const double> z_prev) {
  require(all_finite(z_prev), "switch_matrix: non-finite z_prev");
  const std::vector<double> lq = log_switch_matrix(p, z_prev);
  RowMatrix q(p.K, p.K);
  for (std::size_t j = 0; j < p.K; ++j)
    for (std::size_t k = 0; k < p.K; ++k) q(j, k) = std::exp(lq[j * p.K + k]);
  return q;
}

inline std::vector<double> initial_log_probs(const RmsmParams& p) {
  std::vector<double> li = p.initial_logits;
  log_softmax(li);
  for (double& v : li) v = std::max(v, kLogFloor);
  return li;
}

/// log N(z_next; m_k(z_prev), diag(sigma_k^2)).
inline double transition_logpdf(const RmsmParams& p, std::span<const double> z_prev, std::span<const double> z_next,
                                 std::size_t k) {
  require(k < p.K, "transition_logpdf: regime index out of range");
  require(z_prev.size() == p.m && z_next.size() == p.m, "transition_logpdf: dimension mismatch");
  require(all_finite(z_prev) && all_finite(z_next), "transition_logpdf: non-finite input");
  const std::vector<double> mean = p.transition_mean(k, z_prev);
  return diag_gaussian_logpdf(z_next, mean, std::span<const double>(p.transition_log_sigmas).subspan(k * p.m, p.m));
}

inline double initial_logpdf(const RmsmParams& p, std::span<const double> z0, std::size_t k) {
  return diag_gaussian_logpdf(z0, std::span<const double>(p.initial_means).subspan(k * p.m, p.m),
                              std::span<const double>(p.initial_log_sigmas).subspan(k * p.m, p.m));
}

/// Every log-factor of the joint density for one latent sequence, plus the
/// network tapes needed to differentiate them.
struct LocalTerms {
  std::size_t T = 0;
  std::size_t K = 0;
  std::vector<double> log_init;  // K: log p(s_0 = k)
  RowMatrix log_obs;             // T x K: log p(z_t | z_{t-1}, s_t = k); t = 0 uses p(z_0 | s_0)
  std::vector<double> log_q;     // (T-1) x K x K: [t-1][l][k] = log Q_lk(z_{t-1})
  RowMatrix means;               // (T-1) x (K*m): m_k(z_{t-1}) for step t
  std::vector<MlpTape> transition_tapes;  // (T-1) x K
  std::vector<MlpTape> switch_tapes;      // T-1 (recurrent only)

  double lq(std::size_t t, std::size_t l, std::size_t k) const { return log_q[((t - 1) * K + l) * K + k]; }
};

inline void compute_local_terms(const RmsmParams& p, const RowMatrix& z, LocalTerms& out) {
  require(z.rows() >= 1, "forward_backward: sequence length must be at least 1");
  require(static_cast<std::size_t>(z.cols()) == p.m, "forward_backward: latent dimension mismatch");
  const std::size_t T = static_cast<std::size_t>(z.rows());
  const std::size_t K = p.K;
  const std::size_t m = p.m;
  out.T = T;
  out.K = K;
  out.log_init = initial_log_probs(p);
  out.log_obs.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(K));
  out.log_q.assign((T - 1) * K * K, 0.0);
  out.means.resize(static_cast<Eigen::Index>(T - 1), static_cast<Eigen::Index>(K * m));
  out.transition_tapes.resize((T - 1) * K);
  out.switch_tapes.resize(p.recurrent() ? T - 1 : 0);

  for (std::size_t k = 0; k < K; ++k) out.log_obs(0, static_cast<Eigen::Index>(k)) = initial_logpdf(p, row_span(z, 0), k);
  for (std::size_t t = 1; t < T; ++t) {
    const auto prev = row_span(z, static_cast<Eigen::Index>(t - 1));
    const auto cur = row_span(z, static_cast<Eigen::Index>(t));
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> mean = p.transition_nets[k].forward(prev, out.transition_tapes[(t - 1) * K + k]);
      if (p.residual)
        for (std::size_t i = 0; i < m; ++i) mean[i] += prev[i];
      std::copy(mean.begin(), mean.end(), out.means.data() + (t - 1) * K * m + k * m);
      out.log_obs(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = diag_gaussian_logpdf(
          cur, mean, std::span<const double>(p.transition_log_sigmas).subspan(k * m, m));
    }
    const std::vector<double> lq = log_switch_matrix(p, prev, p.recurrent() ? &out.switch_tapes[t - 1] : nullptr);
    std::copy(lq.begin(), lq.end(), out.log_q.begin() + static_cast<std::ptrdiff_t>((t - 1) * K * K));
  }
}

// ---------------------------------------------------------------------------
// Forward-backward

/// Posterior tables of one forward-backward sweep.
///  log_alpha(t, k): log p(s_t = k | z_{0:t}) (normalised forward message)
///  log_beta(t, k):  backward message scaled by the forward normalisers
///  gamma(t, k):     p(s_t = k | z_{0:T-1})
///  xi[t-1](k, l):   p(s_t = k, s_{t-1} = l | z_{0:T-1}), t = 1..T-1
///  log_norm[t]:     per-step normaliser; loglik = sum of log_norm
struct PosteriorTables {
  RowMatrix log_alpha;
  RowMatrix log_beta;
  RowMatrix gamma;
  std::vector<RowMatrix> xi;
  std::vector<double> log_norm;
  double loglik = 0.0;

  std::size_t T() const { return static_cast<std::size_t>(gamma.rows()); }
  std::size_t K() const { return static_cast<std::size_t>(gamma.cols()); }
};

inline PosteriorTables forward_backward(const LocalTerms& lt) {
  const std::size_t T = lt.T;
  const std::size_t K = lt.K;
  require(T >= 1, "forward_backward: sequence length must be at least 1");
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto Ki = static_cast<Eigen::Index>(K);
  PosteriorTables out;
  out.log_alpha.resize(Ti, Ki);
  out.log_beta.resize(Ti, Ki);
  out.gamma.resize(Ti, Ki);
  out.log_norm.assign(T, 0.0);

  std::vector<double> a(K), tmp(K);
  for (std::size_t k = 0; k < K; ++k) a[k] = lt.log_init[k] + lt.log_obs(0, static_cast<Eigen::Index>(k));
  out.log_norm[0] = log_sum_exp(a);
  for (std::size_t k = 0; k < K; ++k) out.log_alpha(0, static_cast<Eigen::Index>(k)) = a[k] - out.log_norm[0];

  for (std::size_t t = 1; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t l = 0; l < K; ++l) tmp[l] = out.log_alpha(ti - 1, static_cast<Eigen::Index>(l)) + lt.lq(t, l, k);
      a[k] = lt.log_obs(ti, static_cast<Eigen::Index>(k)) + log_sum_exp(tmp);
    }
    out.log_norm[t] = log_sum_exp(a);
    for (std::size_t k = 0; k < K; ++k) out.log_alpha(ti, static_cast<Eigen::Index>(k)) = a[k] - out.log_norm[t];
  }

  for (std::size_t k = 0; k < K; ++k) out.log_beta(Ti - 1, static_cast<Eigen::Index>(k)) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    const auto ti = static_cast<Eigen::Index>(t);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t l = 0; l < K; ++l) {
        const auto li = static_cast<Eigen::Index>(l);
        tmp[l] = lt.lq(t + 1, k, l) + lt.log_obs(ti + 1, li) + out.log_beta(ti + 1, li);
      }
      out.log_beta(ti, static_cast<Eigen::Index>(k)) = log_sum_exp(tmp) - out.log_norm[t + 1];
    }
  }

  double total = 0.0;
  for (double c : out.log_norm) total += c;
  out.loglik = total;

  for (std::size_t t = 0; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    double s = 0.0;
    for (Eigen::Index k = 0; k < Ki; ++k) {
      out.gamma(ti, k) = std::exp(out.log_alpha(ti, k) + out.log_beta(ti, k));
      s += out.gamma(ti, k);
    }
    out.gamma.row(ti) /= s;
  }

  out.xi.resize(T > 0 ? T - 1 : 0);
  for (std::size_t t = 1; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    RowMatrix& x = out.xi[t - 1];
    x.resize(Ki, Ki);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < K; ++l) {
        const auto ki = static_cast<Eigen::Index>(k);
        const double v = std::exp(out.log_alpha(ti - 1, static_cast<Eigen::Index>(l)) + lt.lq(t, l, k) +
                                  lt.log_obs(ti, ki) + out.log_beta(ti, ki) - out.log_norm[t]);
        x(ki, static_cast<Eigen::Index>(l)) = v;
        s += v;
      }
    x /= s;
  }
  return out;
}

inline PosteriorTables forward_backward(const RmsmParams& p, const RowMatrix& z) {
  require(all_finite(std::span<const double>(z.data(), static_cast<std::size_t>(z.size()))),
          "forward_backward: non-finite latent input");
  LocalTerms lt;
  compute_local_terms(p, z, lt);
  return forward_backward(lt);
}

/// Weights multiplying each log-factor's gradient in d log p(z) / d(.).
struct ScoreWeights {
  std::vector<double> init;  // K
  RowMatrix obs;             // T x K
  std::vector<double> q;     // (T-1) x K x K, [t-1][l][k] (same layout as LocalTerms::log_q)
};

/// Weights from the smoothed posteriors: init = gamma_0, obs = gamma,
/// q[t][l][k] = xi_t(k, l).
inline ScoreWeights posterior_weights(const PosteriorTables& tables) {
  const std::size_t T = tables.T();
  const std::size_t K = tables.K();
  ScoreWeights w;
  w.init.resize(K);
  for (std::size_t k = 0; k < K; ++k) w.init[k] = tables.gamma(0, static_cast<Eigen::Index>(k));
  w.obs = tables.gamma;
  w.q.assign((T - 1) * K * K, 0.0);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t l = 0; l < K; ++l)
      for (std::size_t k = 0; k < K; ++k)
        w.q[((t - 1) * K + l) * K + k] = tables.xi[t - 1](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l));
  return w;
}

/// Reverse-mode sweep through the normalised log-space forward recursion:
/// returns d loglik / d(log_init, log_obs, log_q) without using the
/// backward messages. Agrees with posterior_weights() analytically.
inline ScoreWeights filter_adjoint(const LocalTerms& lt) {
  const std::size_t T = lt.T;
  const std::size_t K = lt.K;
  std::vector<std::vector<double>> alpha(T, std::vector<double>(K));
  std::vector<double> a(K), tmp(K);
  for (std::size_t k = 0; k < K; ++k) a[k] = lt.log_init[k] + lt.log_obs(0, static_cast<Eigen::Index>(k));
  double c = log_sum_exp(a);
  for (std::size_t k = 0; k < K; ++k) alpha[0][k] = a[k] - c;
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t l = 0; l < K; ++l) tmp[l] = alpha[t - 1][l] + lt.lq(t, l, k);
      a[k] = lt.log_obs(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) + log_sum_exp(tmp);
    }
    c = log_sum_exp(a);
    for (std::size_t k = 0; k < K; ++k) alpha[t][k] = a[k] - c;
  }

  ScoreWeights w;
  w.init.assign(K, 0.0);
  w.obs = RowMatrix::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(K));
  w.q.assign((T - 1) * K * K, 0.0);
  std::vector<double> alpha_bar(K, 0.0), a_bar(K), next_bar(K);
  for (std::size_t t = T; t-- > 0;) {
    // loglik depends on a_t through c_t (weight 1) and through alpha_t = a_t - c_t.
    double sum_bar = 0.0;
    for (double v : alpha_bar) sum_bar += v;
    for (std::size_t k = 0; k < K; ++k) a_bar[k] = std::exp(alpha[t][k]) * (1.0 - sum_bar) + alpha_bar[k];
    for (std::size_t k = 0; k < K; ++k) w.obs(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = a_bar[k];
    if (t == 0) {
      w.init = a_bar;
      break;
    }
    std::fill(next_bar.begin(), next_bar.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t l = 0; l < K; ++l) tmp[l] = alpha[t - 1][l] + lt.lq(t, l, k);
      const double lse = log_sum_exp(tmp);
      for (std::size_t l = 0; l < K; ++l) {
        const double u_bar = a_bar[k] * std::exp(tmp[l] - lse);
        w.q[((t - 1) * K + l) * K + k] = u_bar;
        next_bar[l] += u_bar;
      }
    }
    alpha_bar = next_bar;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Gradients

/// Adds scale * d log p(z) / d(theta) into `grads` and scale * d log p(z) / dz
/// into `z_grad`, given the score weights of every log-factor. Both
/// the parameter and the latent gradient are the posterior expectation of
/// the complete-data score.
inline void accumulate_gradient(const RmsmParams& p, const RowMatrix& z, const LocalTerms& lt, const ScoreWeights& w,
                                double scale, RmsmParams& grads, RowMatrix& z_grad) {
  const std::size_t T = lt.T;
  const std::size_t K = p.K;
  const std::size_t m = p.m;
  require(static_cast<std::size_t>(z.rows()) == T && w.obs.rows() == z.rows(),
          "loglik_gradient: tables do not match the latent sequence");
  require(static_cast<std::size_t>(w.obs.cols()) == K, "loglik_gradient: tables do not match the regime count");
  if (z_grad.rows() != z.rows() || z_grad.cols() != z.cols()) z_grad = RowMatrix::Zero(z.rows(), z.cols());

  // initial regime distribution
  {
    const std::vector<double> li = lt.log_init;
    double wsum = 0.0;
    for (double v : w.init) wsum += v;
    for (std::size_t j = 0; j < K; ++j) grads.initial_logits[j] += scale * (w.init[j] - std::exp(li[j]) * wsum);
  }
  // initial Gaussian components
  for (std::size_t k = 0; k < K; ++k) {
    const double wk = scale * w.obs(0, static_cast<Eigen::Index>(k));
    if (wk == 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) {
      const double ls = p.initial_log_sigmas[k * m + i];
      const double inv_var = std::exp(-2.0 * ls);
      const double r = z(0, static_cast<Eigen::Index>(i)) - p.initial_means[k * m + i];
      grads.initial_means[k * m + i] += wk * r * inv_var;
      grads.initial_log_sigmas[k * m + i] += wk * (-1.0 + r * r * inv_var);
      z_grad(0, static_cast<Eigen::Index>(i)) -= wk * r * inv_var;
    }
  }

  std::vector<double> dmean(m);
  std::vector<double> dlogits(K * K);
  for (std::size_t t = 1; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    // transitions
    for (std::size_t k = 0; k < K; ++k) {
      const double wk = scale * w.obs(ti, static_cast<Eigen::Index>(k));
      if (wk == 0.0) continue;
      const double* mean = lt.means.data() + (t - 1) * K * m + k * m;
      for (std::size_t i = 0; i < m; ++i) {
        const double ls = p.transition_log_sigmas[k * m + i];
        const double inv_var = std::exp(-2.0 * ls);
        const double r = z(ti, static_cast<Eigen::Index>(i)) - mean[i];
        dmean[i] = wk * r * inv_var;
        grads.transition_log_sigmas[k * m + i] += wk * (-1.0 + r * r * inv_var);
        z_grad(ti, static_cast<Eigen::Index>(i)) -= wk * r * inv_var;
      }
      const std::vector<double> dz_prev =
          p.transition_nets[k].backward(lt.transition_tapes[(t - 1) * K + k], dmean, &grads.transition_nets[k]);
      for (std::size_t i = 0; i < m; ++i)
        z_grad(ti - 1, static_cast<Eigen::Index>(i)) += dz_prev[i] + (p.residual ? dmean[i] : 0.0);
    }
    // switching
    bool any = false;
    for (std::size_t l = 0; l < K; ++l) {
      double wsum = 0.0;
      for (std::size_t k = 0; k < K; ++k) wsum += w.q[((t - 1) * K + l) * K + k];
      for (std::size_t j = 0; j < K; ++j) {
        const double g = scale * (w.q[((t - 1) * K + l) * K + j] - std::exp(lt.lq(t, l, j)) * wsum);
        dlogits[l * K + j] = g;
        any = any || g != 0.0;
      }
    }
    if (!any) continue;
    if (auto* a = std::get_if<AutonomousSwitch>(&grads.switching)) {
      for (std::size_t i = 0; i < K * K; ++i) a->logits[i] += dlogits[i];
    } else {
      const auto& net = std::get<RecurrentSwitch>(p.switching).net;
      auto& gnet = std::get<RecurrentSwitch>(grads.switching).net;
      const std::vector<double> dz_prev = net.backward(lt.switch_tapes[t - 1], dlogits, &gnet);
      for (std::size_t i = 0; i < m; ++i)
        z_grad(ti - 1, static_cast<Eigen::Index>(i)) += dz_prev[i];
    }
  }
}

struct RmsmGradient {
  RmsmParams params;  // d loglik / d theta, same layout as the model
  RowMatrix z;        // d loglik / d z, T x m
};

/// Gradient of log p(z_{0:T-1}) w.r.t. all parameters and the latent inputs.
inline RmsmGradient loglik_gradient(const RmsmParams& p, const RowMatrix& z, const PosteriorTables& tables) {
  require(tables.T() == static_cast<std::size_t>(z.rows()) && tables.K() == p.K,
          "loglik_gradient: tables were computed for a different sequence or model");
  LocalTerms lt;
  compute_local_terms(p, z, lt);
  RmsmGradient g{p.zeros_like(), RowMatrix::Zero(z.rows(), z.cols())};
  accumulate_gradient(p, z, lt, posterior_weights(tables), 1.0, g.params, g.z);
  return g;
}

// ---------------------------------------------------------------------------
// Decoding, sampling, forecasting

/// Per-step argmax of gamma; ties go to the smallest index.
inline std::vector<std::uint32_t> argmax_regimes(const RowMatrix& gamma) {
  std::vector<std::uint32_t> labels(static_cast<std::size_t>(gamma.rows()));
  for (Eigen::Index t = 0; t < gamma.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < gamma.cols(); ++k)
      if (gamma(t, k) > gamma(t, best)) best = k;
    labels[static_cast<std::size_t>(t)] = static_cast<std::uint32_t>(best);
  }
  return labels;
}

inline std::vector<std::uint32_t> argmax_regimes(const PosteriorTables& tables) { return argmax_regimes(tables.gamma); }

struct LatentPath {
  RowMatrix z;                   // T x m
  std::vector<std::uint32_t> s;  // T
};

namespace detail {

inline void sample_transition(const RmsmParams& p, std::span<const double> z_prev, std::size_t s_prev, Rng& rng,
                              std::size_t& s_out, std::span<double> z_out) {
  const RowMatrix q = switch_matrix(p, z_prev);
  std::vector<double> row(p.K);
  for (std::size_t k = 0; k < p.K; ++k) row[k] = q(static_cast<Eigen::Index>(s_prev), static_cast<Eigen::Index>(k));
  s_out = rng.categorical(row);
  const std::vector<double> mean = p.transition_mean(s_out, z_prev);
  for (std::size_t i = 0; i < p.m; ++i) z_out[i] = rng.normal(mean[i], p.transition_sigma(s_out, i));
}

}  // namespace detail

/// Continues a path from (z_last, s_last) for `horizon` ancestral steps.
inline LatentPath sample_continuation(const RmsmParams& p, std::span<const double> z_last, std::size_t s_last,
                                      std::size_t horizon, Rng& rng) {
  LatentPath path{RowMatrix(static_cast<Eigen::Index>(horizon), static_cast<Eigen::Index>(p.m)),
                  std::vector<std::uint32_t>(horizon)};
  std::vector<double> prev(z_last.begin(), z_last.end());
  std::size_t s_prev = s_last;
  for (std::size_t h = 0; h < horizon; ++h) {
    std::size_t s = 0;
    auto out = row_span(path.z, static_cast<Eigen::Index>(h));
    detail::sample_transition(p, prev, s_prev, rng, s, out);
    path.s[h] = static_cast<std::uint32_t>(s);
    prev.assign(out.begin(), out.end());
    s_prev = s;
  }
  return path;
}

/// Ancestral sample of (z, s) of length T.
inline LatentPath sample_path(const RmsmParams& p, std::size_t T, Rng& rng) {
  require(T >= 1, "sample_path: T must be at least 1");
  p.validate();
  LatentPath path{RowMatrix(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(p.m)), std::vector<std::uint32_t>(T)};
  std::vector<double> init = p.initial_logits;
  log_softmax(init);
  for (double& v : init) v = std::exp(v);
  const std::size_t s0 = rng.categorical(init);
  path.s[0] = static_cast<std::uint32_t>(s0);
  for (std::size_t i = 0; i < p.m; ++i)
    path.z(0, static_cast<Eigen::Index>(i)) =
        rng.normal(p.initial_means[s0 * p.m + i], std::exp(p.initial_log_sigmas[s0 * p.m + i]));
  if (T > 1) {
    LatentPath rest = sample_continuation(p, row_span(path.z, 0), s0, T - 1, rng);
    path.z.bottomRows(static_cast<Eigen::Index>(T - 1)) = rest.z;
    std::copy(rest.s.begin(), rest.s.end(), path.s.begin() + 1);
  }
  return path;
}

enum class ForecastMode { Map, MonteCarlo };

struct Forecast {
  RowMatrix z;                   // H x m
  std::vector<std::uint32_t> s;  // H regime labels used for the rollout
  RowMatrix regime_probs;        // H x K predictive regime distribution
};

/// Filtering distribution p(s_{T0-1} | z_{0:T0-1}) of a context.
inline std::vector<double> filtered_posterior(const RmsmParams& p, const RowMatrix& z_context) {
  const PosteriorTables tables = forward_backward(p, z_context);
  std::vector<double> probs(p.K);
  for (std::size_t k = 0; k < p.K; ++k)
    probs[k] = std::exp(tables.log_alpha(z_context.rows() - 1, static_cast<Eigen::Index>(k)));
  return probs;
}

/// Rolls the prior forward from a context.
///  Map: greedy decoding; the predictive regime distribution at each step is
///       onehot(previous label) * Q(previous z) (the filter posterior for the
///       first step), the label is its argmax and z follows that regime's mean.
///  MonteCarlo: average of n_samples ancestral continuations, the last
///       context regime drawn from the filter posterior.
inline Forecast forecast(const RmsmParams& p, const RowMatrix& z_context, std::size_t horizon, ForecastMode mode,
                         std::size_t n_samples = 1, std::uint64_t seed = 0) {
  require(z_context.rows() >= 1, "forecast: context must contain at least one step");
  const std::size_t K = p.K;
  const std::size_t m = p.m;
  const auto H = static_cast<Eigen::Index>(horizon);
  Forecast out{RowMatrix::Zero(H, static_cast<Eigen::Index>(m)), std::vector<std::uint32_t>(horizon),
               RowMatrix::Zero(H, static_cast<Eigen::Index>(K))};
  if (horizon == 0) return out;
  const std::vector<double> filt = filtered_posterior(p, z_context);
  const auto last = row_span(z_context, z_context.rows() - 1);

  if (mode == ForecastMode::Map) {
    std::vector<double> state = filt;
    std::vector<double> prev(last.begin(), last.end());
    for (std::size_t h = 0; h < horizon; ++h) {
      const RowMatrix q = switch_matrix(p, prev);
      std::size_t best = 0;
      for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t l = 0; l < K; ++l) acc += state[l] * q(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k));
        out.regime_probs(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(k)) = acc;
        if (acc > out.regime_probs(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(best))) best = k;
      }
      out.s[h] = static_cast<std::uint32_t>(best);
      const std::vector<double> next = p.transition_mean(best, prev);
      for (std::size_t i = 0; i < m; ++i) out.z(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(i)) = next[i];
      prev = next;
      std::fill(state.begin(), state.end(), 0.0);
      state[best] = 1.0;
    }
    return out;
  }

  require(n_samples >= 1, "forecast: Monte Carlo mode needs at least one sample");
  Rng rng(seed);
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::size_t s_last = rng.categorical(filt);
    const LatentPath path = sample_continuation(p, last, s_last, horizon, rng);
    out.z += path.z;
    for (std::size_t h = 0; h < horizon; ++h) out.regime_probs(static_cast<Eigen::Index>(h), path.s[h]) += 1.0;
  }
  out.z /= static_cast<double>(n_samples);
  out.regime_probs /= static_cast<double>(n_samples);
  out.s = argmax_regimes(out.regime_probs);
  return out;
}

}  // namespace rsds

#endif  // RSDS_RMSM_HPP
