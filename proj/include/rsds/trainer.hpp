#ifndef RSDS_TRAINER_HPP
#define RSDS_TRAINER_HPP

// Exact maximum likelihood for x_t = f(z_t, eps_t):
//   log p(x) = sum_t log|det J_{f^-1}(x_t)| + log p(z_{0:T-1}) + sum_t log N(eps_t; 0, sigma_eps^2 I)

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rsds/dataset.hpp"
#include "rsds/error.hpp"
#include "rsds/flow.hpp"
#include "rsds/rmsm.hpp"
#include "rsds/rng.hpp"
#include "rsds/types.hpp"

namespace rsds {

struct Model {
  FlowStack flow;
  RmsmParams prior;
  double sigma_eps = 0.1;
};

enum class ParamGroup { Flow, Prior, Switch };

struct ParamRef {
  std::string name;
  std::span<double> values;
  ParamGroup group;
};

/// Every trainable tensor of a model, in a fixed order.
inline std::vector<ParamRef> param_refs(Model& model) {
  std::vector<ParamRef> refs;
  for_each_flow_param(model.flow, "flow.", [&](const std::string& name, std::span<double> v) {
    refs.push_back({name, v, ParamGroup::Flow});
  });
  for_each_rmsm_param(model.prior, "prior.", [&](const std::string& name, std::span<double> v, bool sw) {
    refs.push_back({name, v, sw ? ParamGroup::Switch : ParamGroup::Prior});
  });
  return refs;
}

// param_count and flatten only read through the references.
inline std::size_t param_count(const Model& model) {
  std::size_t total = 0;
  for (const auto& r : param_refs(const_cast<Model&>(model))) total += r.values.size();
  return total;
}

inline std::vector<double> flatten(const Model& model) {
  std::vector<double> out;
  for (const auto& r : param_refs(const_cast<Model&>(model))) out.insert(out.end(), r.values.begin(), r.values.end());
  return out;
}

inline void unflatten(Model& model, std::span<const double> flat) {
  std::size_t at = 0;
  for (const auto& r : param_refs(model)) {
    require(at + r.values.size() <= flat.size(), "unflatten: vector too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + r.values.size()),
              r.values.begin());
    at += r.values.size();
  }
  require(at == flat.size(), "unflatten: vector too long");
}

inline Model zeros_like(const Model& model) { return {model.flow.zeros_like(), model.prior.zeros_like(), 0.0}; }

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveTerms {
  double logdet = 0.0;  // sum_t log|det J_{f^-1}(x_t)|
  double prior = 0.0;   // log p(z_{0:T-1})
  double noise = 0.0;   // sum_t log N(eps_t; 0, sigma_eps^2 I)
  double align = 0.0;   // MSE to the alignment targets (0 when unused)
  double loglik() const { return logdet + prior + noise; }
};

/// Per-thread scratch reused across sequences.
struct SequenceWorkspace {
  std::vector<FlowTape> tapes;
  LocalTerms local;
  RowMatrix z, eps, z_grad;
  PosteriorTables tables;
};

struct AlignTerm {
  const RowMatrix* targets = nullptr;  // T x m
  double weight = 0.0;
};

/// Mean squared error between z and targets and its gradient w.r.t. z,
/// 2 (z - targets) / (T m).
inline double pca_align_loss(const RowMatrix& z, const RowMatrix& targets, RowMatrix* grad = nullptr) {
  require(z.rows() == targets.rows() && z.cols() == targets.cols(), "pca_align_loss: shape mismatch");
  const double count = static_cast<double>(z.size());
  const RowMatrix diff = z - targets;
  if (grad) *grad = diff * (2.0 / count);
  return diff.squaredNorm() / count;
}

/// Evaluates the exact log-density of one sequence. When `grads` is non-null,
/// adds scale * d(loglik - align.weight * MSE)/d(params) into it.
inline ObjectiveTerms sequence_objective(const Model& model, const RowMatrix& x, SequenceWorkspace& ws,
                                         Model* grads = nullptr, double scale = 1.0, const AlignTerm& align = {}) {
  const FlowStack& flow = model.flow;
  const std::size_t n = flow.dim();
  const std::size_t m = flow.latent_dim();
  const std::size_t d = n - m;
  require(static_cast<std::size_t>(x.cols()) == n, "sequence_objective: observation dim does not match the flow");
  require(model.prior.m == m, "sequence_objective: prior latent dim does not match the flow split");
  require(model.sigma_eps > 0.0, "sequence_objective: sigma_eps must be positive");
  const auto T = static_cast<std::size_t>(x.rows());
  require(T >= 1, "sequence_objective: empty sequence");

  ObjectiveTerms terms;
  ws.tapes.resize(T);
  ws.z.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(m));
  ws.eps.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d));
  const double inv_var = 1.0 / (model.sigma_eps * model.sigma_eps);
  const double log_sigma = std::log(model.sigma_eps);
  for (std::size_t t = 0; t < T; ++t) {
    double ld = 0.0;
    const std::vector<double> v = flow.inverse(row_span(x, static_cast<Eigen::Index>(t)), &ld, grads ? &ws.tapes[t] : nullptr);
    terms.logdet += ld;
    for (std::size_t i = 0; i < m; ++i) ws.z(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = v[i];
    for (std::size_t i = 0; i < d; ++i) {
      const double e = v[m + i];
      ws.eps(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = e;
      terms.noise += -0.5 * kLog2Pi - log_sigma - 0.5 * e * e * inv_var;
    }
  }
  compute_local_terms(model.prior, ws.z, ws.local);
  ws.tables = forward_backward(ws.local);
  terms.prior = ws.tables.loglik;

  RowMatrix align_grad;
  if (align.targets) terms.align = pca_align_loss(ws.z, *align.targets, align.weight > 0.0 && grads ? &align_grad : nullptr);

  if (!grads) return terms;
  if (!std::isfinite(terms.loglik())) return terms;

  ws.z_grad = RowMatrix::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(m));
  accumulate_gradient(model.prior, ws.z, ws.local, posterior_weights(ws.tables), scale, grads->prior, ws.z_grad);
  std::vector<double> gv(n);
  for (std::size_t t = 0; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    for (std::size_t i = 0; i < m; ++i) {
      double g = ws.z_grad(ti, static_cast<Eigen::Index>(i));
      if (align_grad.size() > 0) g -= scale * align.weight * align_grad(ti, static_cast<Eigen::Index>(i));
      gv[i] = g;
    }
    for (std::size_t i = 0; i < d; ++i) gv[m + i] = -scale * ws.eps(ti, static_cast<Eigen::Index>(i)) * inv_var;
    flow.backward(ws.tapes[t], gv, scale, &grads->flow);
  }
  return terms;
}

inline ObjectiveTerms sequence_objective(const Model& model, const RowMatrix& x) {
  SequenceWorkspace ws;
  return sequence_objective(model, x, ws);
}

/// Latents f^{-1}(x)_{0:m} of one sequence.
inline RowMatrix encode(const FlowStack& flow, const RowMatrix& x) {
  RowMatrix z(x.rows(), static_cast<Eigen::Index>(flow.latent_dim()));
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const std::vector<double> v = flow.inverse(row_span(x, t));
    for (Eigen::Index i = 0; i < z.cols(); ++i) z(t, i) = v[static_cast<std::size_t>(i)];
  }
  return z;
}

// ---------------------------------------------------------------------------
// PCA initialisation

struct PcaResult {
  Eigen::VectorXd mean;         // n
  Eigen::MatrixXd basis;        // n x n, columns sorted by decreasing variance
  Eigen::VectorXd variances;    // n, decreasing
  std::size_t rank = 0;         // numerically nonzero variances
  Eigen::VectorXd scale;        // n, divisor applied to each projection (ones unless whitened)
  bool whitened = false;
  std::vector<RowMatrix> targets;  // per sequence, T x m projections
};

/// Principal directions of the pooled, centred observations and the
/// per-sequence projections onto the top m of them. With `whiten` each
/// projection is divided by its standard deviation.
inline PcaResult pca_init(const Dataset& data, std::size_t m, bool whiten = false) {
  require(data.size() > 0 && data.length() > 0, "pca_init: empty dataset");
  require(m >= 1 && m <= data.n, "pca_init: m must be in [1, n]");
  const auto n = static_cast<Eigen::Index>(data.n);
  PcaResult r;
  r.mean = Eigen::VectorXd::Zero(n);
  double count = 0.0;
  for (const auto& x : data.x) {
    r.mean += x.colwise().sum().transpose();
    count += static_cast<double>(x.rows());
  }
  r.mean /= count;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (const auto& x : data.x) {
    const Eigen::MatrixXd c = x.rowwise() - r.mean.transpose();
    cov.noalias() += c.transpose() * c;
  }
  cov /= count;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  r.basis = eig.eigenvectors().rowwise().reverse();
  r.variances = eig.eigenvalues().reverse().cwiseMax(0.0);
  // Deterministic orientation: largest-magnitude entry of each direction positive.
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index arg = 0;
    r.basis.col(j).cwiseAbs().maxCoeff(&arg);
    if (r.basis(arg, j) < 0.0) r.basis.col(j) *= -1.0;
  }
  const double tol = 1e-12 * std::max(1.0, r.variances(0));
  r.rank = static_cast<std::size_t>((r.variances.array() > tol).count());
  if (r.rank < m) {
    // rank-deficient: keep the available directions, zero the rest of the projection
    for (auto j = static_cast<Eigen::Index>(r.rank); j < static_cast<Eigen::Index>(m); ++j) r.variances(j) = 0.0;
  }
  r.scale = Eigen::VectorXd::Ones(n);
  r.whitened = whiten;
  if (whiten)
    for (Eigen::Index j = 0; j < n; ++j)
      if (r.variances(j) > tol) r.scale(j) = std::sqrt(r.variances(j));
  const Eigen::MatrixXd top =
      r.basis.leftCols(static_cast<Eigen::Index>(m)) * r.scale.head(static_cast<Eigen::Index>(m)).cwiseInverse().asDiagonal();
  r.targets.reserve(data.size());
  for (const auto& x : data.x) {
    RowMatrix proj = (x.rowwise() - r.mean.transpose()) * top;
    for (auto j = static_cast<Eigen::Index>(r.rank); j < static_cast<Eigen::Index>(m); ++j) proj.col(j).setZero();
    r.targets.push_back(std::move(proj));
  }
  return r;
}

/// Sets the data-side LU layer to the PCA rotation (so z at initialisation
/// equals the PCA projections) and moment-matches the prior's initial and
/// transition scales to the projected features. Transition log-scales of
/// the K regimes are offset evenly across [-sigma_spread, sigma_spread].
/// When whitened, the trailing noise directions are scaled to sd sigma_eps.
inline void apply_pca_init(Model& model, const PcaResult& pca, Rng& rng, double sigma_spread = 0.0) {
  const std::size_t m = model.prior.m;
  const std::size_t K = model.prior.K;
  auto& layers = model.flow.layers();
  if (!layers.empty() && std::holds_alternative<LuMixing>(layers.back())) {
    std::vector<double> mean(pca.mean.data(), pca.mean.data() + pca.mean.size());
    Eigen::VectorXd scale = pca.whitened ? pca.scale : Eigen::VectorXd::Ones(pca.mean.size());
    if (pca.whitened)
      for (auto j = static_cast<Eigen::Index>(m); j < scale.size(); ++j) scale(j) /= model.sigma_eps;
    layers.back() = LuMixing::from_matrix(pca.basis * scale.asDiagonal(), mean);
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      if (std::holds_alternative<LuMixing>(layers[i])) layers[i] = LuMixing::identity(model.flow.dim());
  }
  Eigen::VectorXd first_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  Eigen::VectorXd first_sq = first_mean, step_sq = first_mean;
  double steps = 0.0;
  for (const auto& tgt : pca.targets) {
    first_mean += tgt.row(0).transpose();
    first_sq += tgt.row(0).transpose().cwiseAbs2();
    for (Eigen::Index t = 1; t < tgt.rows(); ++t) step_sq += (tgt.row(t) - tgt.row(t - 1)).transpose().cwiseAbs2();
    steps += static_cast<double>(tgt.rows() - 1);
  }
  const double N = static_cast<double>(pca.targets.size());
  first_mean /= N;
  const Eigen::VectorXd first_sd = (first_sq / N - first_mean.cwiseAbs2()).cwiseMax(1e-8).cwiseSqrt();
  const Eigen::VectorXd step_sd = (step_sq / std::max(steps, 1.0)).cwiseMax(1e-8).cwiseSqrt();
  for (std::size_t k = 0; k < K; ++k) {
    const double offset = K > 1 ? sigma_spread * (2.0 * static_cast<double>(k) / static_cast<double>(K - 1) - 1.0) : 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      model.prior.initial_means[k * m + i] = first_mean(ii) + 0.5 * first_sd(ii) * rng.normal();
      model.prior.initial_log_sigmas[k * m + i] = std::log(first_sd(ii));
      model.prior.transition_log_sigmas[k * m + i] = std::log(step_sd(ii)) + offset + 0.1 * rng.normal();
    }
  }
}

// ---------------------------------------------------------------------------
// Optimisation

struct TrainConfig {
  double sigma_eps = 0.1;
  double lr_flow = 1e-4;
  double lr_rmsm = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::size_t q_freeze_epochs = 10;
  double pca_align_weight = 1.0;
  std::size_t pca_align_steps = 500;
  std::size_t lr_drop_epoch = 0;  // 0 disables the drop
  double lr_drop_factor = 0.1;
  double sigma_floor = 1e-4;
  bool pca_init = true;
  bool pca_whiten = true;         // unit-variance PCA features
  double pca_sigma_spread = 0.7;  // spread of initial transition log-scales across regimes
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    require(sigma_eps > 0.0 && lr_flow > 0.0 && lr_rmsm > 0.0, "TrainConfig: rates must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0,
            "TrainConfig: invalid Adam hyperparameters");
    require(batch_size >= 1 && threads >= 1, "TrainConfig: batch size and thread count must be positive");
    require(pca_align_weight >= 0.0 && lr_drop_factor > 0.0 && sigma_floor > 0.0 && pca_sigma_spread >= 0.0,
            "TrainConfig: invalid schedule");
  }
};

/// Optimiser and schedule state; everything needed to resume bit-exactly.
struct TrainerState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  Rng rng;
  bool initialised = false;  // PCA initialisation already applied
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loglik_per_step = 0.0;  // mean over the epoch's accepted batches
  double grad_norm = 0.0;        // mean batch gradient norm
  double seconds = 0.0;
  std::size_t rejected = 0;
  std::vector<double> occupancy;  // fraction of argmax regimes
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  bool diverged = false;
  std::string diagnostic;
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void apply_sigma_floor(RmsmParams& p, double floor) {
  const double lf = std::log(floor);
  for (double& v : p.transition_log_sigmas) v = std::max(v, lf);
  for (double& v : p.initial_log_sigmas) v = std::max(v, lf);
}

inline const char* diverged_term(const ObjectiveTerms& t) {
  if (!std::isfinite(t.logdet)) return "log-determinant";
  if (!std::isfinite(t.prior)) return "prior log-likelihood";
  if (!std::isfinite(t.noise)) return "noise log-likelihood";
  return "gradient";
}

}  // namespace detail

/// Result of one minibatch: per-sequence gradients reduced in index order,
/// so the sum does not depend on the thread count.
struct BatchResult {
  std::vector<double> grad;  // flat, same order as flatten()
  double loglik = 0.0;       // sum over sequences
  std::size_t steps = 0;     // sum of sequence lengths
  bool finite = true;
  std::string diagnostic;
  std::vector<std::size_t> occupancy;
};

inline BatchResult batch_gradient(const Model& model, const Dataset& data, std::span<const std::size_t> batch,
                                  const std::vector<RowMatrix>* targets, double align_weight, std::size_t threads) {
  const std::size_t B = batch.size();
  std::vector<std::vector<double>> per_seq(B);
  std::vector<ObjectiveTerms> terms(B);
  std::vector<std::vector<std::uint32_t>> labels(B);
  auto work = [&](std::size_t lo, std::size_t hi) {
    SequenceWorkspace ws;
    Model g = zeros_like(model);
    for (std::size_t b = lo; b < hi; ++b) {
      const std::size_t idx = batch[b];
      const RowMatrix& x = data.x[idx];
      const double scale = 1.0 / (static_cast<double>(B) * static_cast<double>(x.rows()));
      AlignTerm align;
      if (targets && align_weight > 0.0) align = {&(*targets)[idx], align_weight};
      g = zeros_like(model);
      terms[b] = sequence_objective(model, x, ws, &g, scale, align);
      per_seq[b] = flatten(g);
      labels[b] = argmax_regimes(ws.tables);
    }
  };
  const std::size_t nt = std::min(threads, B);
  if (nt <= 1) {
    work(0, B);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < nt; ++i) pool.emplace_back(work, B * i / nt, B * (i + 1) / nt);
    for (auto& th : pool) th.join();
  }
  BatchResult r;
  r.grad.assign(per_seq.empty() ? 0 : per_seq[0].size(), 0.0);
  r.occupancy.assign(model.prior.K, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const double ll = terms[b].loglik();
    if (!std::isfinite(ll) || !all_finite(per_seq[b])) {
      r.finite = false;
      r.diagnostic = std::string("non-finite ") + detail::diverged_term(terms[b]) + " on sequence " + std::to_string(batch[b]);
      return r;
    }
    r.loglik += ll;
    r.steps += static_cast<std::size_t>(data.x[batch[b]].rows());
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] += per_seq[b][i];
    for (auto l : labels[b]) ++r.occupancy[l];
  }
  return r;
}

using EpochCallback = std::function<void(const EpochRecord&, const Model&, const TrainerState&)>;

/// Adam ascent on the mean per-sequence objective (log-likelihood per step).
/// Resumes from `state` when it carries optimiser moments.
inline TrainReport fit(const Dataset& data, const TrainConfig& cfg, Model& model, TrainerState& state,
                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  data.validate();
  require(data.n == model.flow.dim(), "fit: dataset observation dim does not match the model");
  model.sigma_eps = cfg.sigma_eps;
  TrainReport report;
  if (cfg.epochs == 0 || state.epoch >= cfg.epochs) return report;

  std::optional<PcaResult> pca;
  const bool use_align = cfg.pca_align_weight > 0.0 && cfg.pca_align_steps > 0;
  if (use_align || (cfg.pca_init && !state.initialised)) pca = pca_init(data, model.prior.m, cfg.pca_whiten);
  if (cfg.pca_init && !state.initialised) {
    Rng init_rng(stream_seed(cfg.seed, 0xC0FFEE));
    apply_pca_init(model, *pca, init_rng, cfg.pca_sigma_spread);
  }
  if (!state.initialised) {
    state.rng = Rng(stream_seed(cfg.seed, 0x5EED));
    state.initialised = true;
  }

  std::vector<ParamRef> refs = param_refs(model);
  std::size_t total = 0;
  for (const auto& r : refs) total += r.values.size();
  if (state.adam_m.size() != total) {
    state.adam_m.assign(total, 0.0);
    state.adam_v.assign(total, 0.0);
  }

  std::vector<std::size_t> order(data.size());
  std::size_t consecutive_bad = 0;
  for (; state.epoch < cfg.epochs; ++state.epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    state.rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = state.epoch + 1;
    double ll_sum = 0.0, norm_sum = 0.0;
    std::size_t step_sum = 0, batches = 0;
    std::vector<std::size_t> occ(model.prior.K, 0);
    const bool freeze_q = state.epoch < cfg.q_freeze_epochs;
    const bool dropped = cfg.lr_drop_epoch > 0 && state.epoch >= cfg.lr_drop_epoch;
    const double lr_flow = cfg.lr_flow * (dropped ? cfg.lr_drop_factor : 1.0);
    const double lr_rmsm = cfg.lr_rmsm * (dropped ? cfg.lr_drop_factor : 1.0);

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      double align_weight = 0.0;
      if (use_align && state.step < cfg.pca_align_steps)
        align_weight = cfg.pca_align_weight * (1.0 - static_cast<double>(state.step) / static_cast<double>(cfg.pca_align_steps));
      const BatchResult br = batch_gradient(model, data, std::span<const std::size_t>(order).subspan(begin, end - begin),
                                            pca ? &pca->targets : nullptr, align_weight, cfg.threads);
      if (!br.finite) {
        ++rec.rejected;
        report.diagnostic = br.diagnostic;
        if (++consecutive_bad >= 3) {
          report.diverged = true;
          report.diagnostic = "diverged: " + br.diagnostic + " for 3 consecutive steps";
          report.epochs.push_back(rec);
          return report;
        }
        continue;
      }
      consecutive_bad = 0;
      ++state.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
      double sq = 0.0;
      std::size_t at = 0;
      for (const auto& r : refs) {
        const std::size_t len = r.values.size();
        if (r.group == ParamGroup::Switch && freeze_q) {
          at += len;
          continue;
        }
        const double lr = r.group == ParamGroup::Flow ? lr_flow : lr_rmsm;
        for (std::size_t i = 0; i < len; ++i, ++at) {
          const double g = br.grad[at];  // ascent direction
          sq += g * g;
          state.adam_m[at] = cfg.beta1 * state.adam_m[at] + (1.0 - cfg.beta1) * g;
          state.adam_v[at] = cfg.beta2 * state.adam_v[at] + (1.0 - cfg.beta2) * g * g;
          const double mh = state.adam_m[at] / bc1;
          const double vh = state.adam_v[at] / bc2;
          r.values[i] += lr * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
      }
      for (auto& net : model.prior.transition_nets) net.apply_masks();
      detail::apply_sigma_floor(model.prior, cfg.sigma_floor);
      ll_sum += br.loglik;
      step_sum += br.steps;
      norm_sum += std::sqrt(sq);
      ++batches;
      for (std::size_t k = 0; k < occ.size(); ++k) occ[k] += br.occupancy[k];
    }
    if (batches == 0 && rec.rejected > 0) {
      report.diverged = true;
      report.diagnostic = "diverged: " + report.diagnostic + " on every batch of epoch " + std::to_string(rec.epoch);
      report.epochs.push_back(rec);
      return report;
    }
    rec.loglik_per_step = step_sum ? ll_sum / static_cast<double>(step_sum) : 0.0;
    rec.grad_norm = batches ? norm_sum / static_cast<double>(batches) : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double occ_total = 0.0;
    for (auto c : occ) occ_total += static_cast<double>(c);
    for (auto c : occ) rec.occupancy.push_back(occ_total > 0 ? static_cast<double>(c) / occ_total : 0.0);
    report.epochs.push_back(rec);
    if (on_epoch) {
      TrainerState snapshot = state;
      ++snapshot.epoch;
      on_epoch(rec, model, snapshot);
    }
  }
  return report;
}

inline TrainReport fit(const Dataset& data, const TrainConfig& cfg, Model& model) {
  TrainerState state;
  return fit(data, cfg, model, state);
}

/// Mean log-likelihood per time step over a dataset.
inline double mean_loglik_per_step(const Model& model, const Dataset& data) {
  SequenceWorkspace ws;
  double total = 0.0;
  std::size_t steps = 0;
  for (const auto& x : data.x) {
    total += sequence_objective(model, x, ws).loglik();
    steps += static_cast<std::size_t>(x.rows());
  }
  return steps ? total / static_cast<double>(steps) : 0.0;
}

}  // namespace rsds

#endif  // RSDS_TRAINER_HPP
