#ifndef RSDS_CLI_HPP
#define RSDS_CLI_HPP

// Command implementations behind the rsds executable. Each command reads
// its inputs, writes key=value records and returns a process exit code:
// 0 success, 1 usage or configuration error, 2 data error, 3 numerical
// divergence.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rsds/checkpoint.hpp"
#include "rsds/config.hpp"
#include "rsds/dataset.hpp"
#include "rsds/datagen.hpp"
#include "rsds/eval.hpp"
#include "rsds/theory.hpp"
#include "rsds/trainer.hpp"

namespace rsds {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitDiverged = 3 };

/// Inputs that do not fit together (shapes, missing files, labels).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel log_level_from_env() {
  const char* v = std::getenv("RSDS_LOG");
  if (!v) return LogLevel::Info;
  const std::string s(v);
  if (s == "error") return LogLevel::Error;
  if (s == "warn") return LogLevel::Warn;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

/// Newline-delimited key=value records on a stream, filtered by level.
class Logger {
 public:
  Logger(std::ostream& os, LogLevel level) : os_(os), level_(level) {}
  void log(LogLevel level, const std::string& record) const {
    if (level > level_) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    os_ << "level=" << names[static_cast<int>(level)] << ' ' << record << '\n';
  }
  void error(const std::string& r) const { log(LogLevel::Error, r); }
  void warn(const std::string& r) const { log(LogLevel::Warn, r); }
  void info(const std::string& r) const { log(LogLevel::Info, r); }
  void debug(const std::string& r) const { log(LogLevel::Debug, r); }

 private:
  std::ostream& os_;
  LogLevel level_;
};

struct CliOptions {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string resume;
  std::string log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool deterministic = false;
  std::vector<std::string> overrides;  // section.key=value
};

inline std::string fmt(double v) { return detail::format_value(v); }

inline std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Library-level operations used by the commands

/// Smoothed argmax regimes of every sequence under a model.
inline std::vector<std::vector<std::uint32_t>> decode_regimes(const Model& model, const std::vector<RowMatrix>& x) {
  std::vector<std::vector<std::uint32_t>> out;
  for (const auto& xi : x) out.push_back(argmax_regimes(forward_backward(model.prior, encode(model.flow, xi))));
  return out;
}

struct EvalReport {
  std::size_t sequences = 0;
  std::size_t steps = 0;
  double loglik_per_step = 0.0;
  std::optional<double> mcc;
  std::optional<double> f1;
  std::vector<std::size_t> true_of_est;
  std::vector<std::string> notices;
};

inline EvalReport evaluate(const Model& model, const Dataset& data) {
  if (data.n != model.flow.dim())
    throw DataError("data has n=" + std::to_string(data.n) + " but the model expects n=" + std::to_string(model.flow.dim()));
  EvalReport r;
  r.sequences = data.size();
  r.steps = data.size() * data.length();
  r.loglik_per_step = mean_loglik_per_step(model, data);
  std::vector<RowMatrix> z;
  for (const auto& x : data.x) z.push_back(encode(model.flow, x));
  if (data.has_z() && data.m == model.prior.m) {
    const MccResult m = mcc(z, data.z);
    r.mcc = m.score;
    if (m.degenerate_dims) r.notices.push_back("mcc: " + std::to_string(m.degenerate_dims) + " estimated dims have zero variance");
  } else {
    r.notices.push_back(data.has_z() ? "mcc skipped: latent dimension differs from the model" : "mcc skipped: no latent ground truth");
  }
  if (data.has_s()) {
    std::vector<std::vector<std::uint32_t>> s;
    for (const auto& zi : z) s.push_back(argmax_regimes(forward_backward(model.prior, zi)));
    const F1Result f = regime_f1(s, data.s, std::max(model.prior.K, data.K));
    r.f1 = f.score;
    r.true_of_est = f.true_of_est;
  } else {
    r.notices.push_back("f1 skipped: no regime ground truth");
  }
  return r;
}

struct ForecastReport {
  std::size_t used = 0;
  std::size_t skipped = 0;
  double mse = 0.0;                   // observation space, mean over used sequences
  std::vector<double> mse_per_step;   // H
  std::optional<double> input_f1;     // regimes decoded on the context
  std::optional<double> pred_f1;      // predicted regimes, relabelled with the context permutation
  std::vector<std::size_t> used_index;
  std::vector<RowMatrix> predictions;  // H x n
  std::vector<std::vector<std::uint32_t>> predicted_regimes;
};

/// Conditions on the first `context` steps of each sequence and rolls out
/// `horizon` steps; sequences shorter than context + horizon are skipped.
inline ForecastReport forecast_dataset(const Model& model, const Dataset& data, std::size_t context, std::size_t horizon,
                                       ForecastMode mode, std::size_t samples, std::uint64_t seed) {
  if (data.n != model.flow.dim())
    throw DataError("data has n=" + std::to_string(data.n) + " but the model expects n=" + std::to_string(model.flow.dim()));
  require(context >= 1, "forecast: context must be at least one step");
  ForecastReport r;
  r.mse_per_step.assign(horizon, 0.0);
  std::vector<std::vector<std::uint32_t>> in_est, in_true, pred_true;
  const std::size_t m = model.prior.m, n = model.flow.dim();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const RowMatrix& x = data.x[i];
    if (context + horizon > static_cast<std::size_t>(x.rows())) {
      ++r.skipped;
      continue;
    }
    const RowMatrix z_ctx = encode(model.flow, x.topRows(static_cast<Eigen::Index>(context)));
    const Forecast fc = forecast(model.prior, z_ctx, horizon, mode, samples, stream_seed(seed, i));
    RowMatrix pred(static_cast<Eigen::Index>(horizon), static_cast<Eigen::Index>(n));
    const std::vector<double> eps(n - m, 0.0);
    for (std::size_t h = 0; h < horizon; ++h) {
      const std::vector<double> xh = flow_forward(model.flow, row_span(fc.z, static_cast<Eigen::Index>(h)), eps);
      for (std::size_t j = 0; j < n; ++j) pred(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(j)) = xh[j];
    }
    const RowMatrix truth = x.middleRows(static_cast<Eigen::Index>(context), static_cast<Eigen::Index>(horizon));
    const ForecastError fe = forecast_error(pred, truth);
    for (std::size_t h = 0; h < horizon; ++h) r.mse_per_step[h] += fe.per_step[h];
    r.mse += fe.mean;
    if (data.has_s()) {
      in_est.push_back(argmax_regimes(forward_backward(model.prior, z_ctx)));
      in_true.emplace_back(data.s[i].begin(), data.s[i].begin() + static_cast<std::ptrdiff_t>(context));
      pred_true.emplace_back(data.s[i].begin() + static_cast<std::ptrdiff_t>(context),
                             data.s[i].begin() + static_cast<std::ptrdiff_t>(context + horizon));
    }
    r.used_index.push_back(i);
    r.predictions.push_back(std::move(pred));
    r.predicted_regimes.push_back(fc.s);
    ++r.used;
  }
  if (r.used) {
    r.mse /= static_cast<double>(r.used);
    for (double& v : r.mse_per_step) v /= static_cast<double>(r.used);
  }
  if (r.used && data.has_s()) {
    const std::size_t K = std::max(model.prior.K, data.K);
    const F1Result f = regime_f1(in_est, in_true, K);
    r.input_f1 = f.score;
    if (horizon > 0) r.pred_f1 = regime_f1_fixed(r.predicted_regimes, pred_true, K, f.true_of_est);
  }
  return r;
}

/// Flow that is the identity on R^n with the first m coordinates latent.
inline FlowStack identity_flow(std::size_t n, std::size_t m) {
  FlowStack f(n, m);
  f.add(LuMixing::identity(n));
  return f;
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline RunConfig resolve_config(const CliOptions& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : load_config(opt.config);
  for (const auto& o : opt.overrides) apply_override(cfg, o);
  if (opt.threads) cfg.train.threads = *opt.threads;
  // --deterministic needs no switch: batch reductions always run in index order
  return cfg;
}

inline std::string with_suffix(const std::string& path, const std::string& suffix, const std::string& ext) {
  const auto dot = path.rfind('.');
  const auto slash = path.rfind('/');
  const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
  return (has_ext ? path.substr(0, dot) : path) + suffix + ext;
}

inline Dataset load_data(const std::string& path) {
  if (path.empty()) throw ConfigError("--data is required");
  try {
    return read_dataset(path);
  } catch (const ParseError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline Checkpoint load_ckpt(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  try {
    return load_checkpoint(path);
  } catch (const ParseError& e) {
    throw DataError(path + ": " + e.what());
  }
}

template <class Body>
int guarded(const Logger& log, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log.error("event=config_error message=\"" + std::string(e.what()) + "\"");
    return kExitUsage;
  } catch (const DataError& e) {
    log.error("event=data_error message=\"" + std::string(e.what()) + "\"");
    return kExitData;
  } catch (const ParseError& e) {
    log.error("event=data_error message=\"" + std::string(e.what()) + "\"");
    return kExitData;
  } catch (const DivergenceError& e) {
    log.error("event=diverged message=\"" + std::string(e.what()) + "\"");
    return kExitDiverged;
  } catch (const NumericalError& e) {
    log.error("event=numerical_error message=\"" + std::string(e.what()) + "\"");
    return kExitDiverged;
  } catch (const ContractViolation& e) {
    log.error("event=data_error message=\"" + std::string(e.what()) + "\"");
    return kExitData;
  } catch (const std::exception& e) {
    log.error("event=error message=\"" + std::string(e.what()) + "\"");
    return kExitData;
  }
}

inline void validate_config(const RunConfig& cfg) {
  try {
    cfg.train.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("[train] ") + e.what());
  }
  if (cfg.model.init_stay < 0.0 || cfg.model.init_stay >= 1.0) throw ConfigError("model.init_stay must be in [0, 1)");
  if (cfg.eval.mode != "map" && cfg.eval.mode != "mc") throw ConfigError("eval.mode must be map or mc");
  const std::string& k = cfg.generator.kind;
  if (k != "synthetic" && k != "cosine" && k != "ball") throw ConfigError("generator.kind must be synthetic, cosine or ball");
}

}  // namespace detail

/// Writes the dataset (and a held-out split and ground-truth checkpoint
/// when the generator provides them).
inline int cmd_generate(const CliOptions& opt, std::ostream& out, const Logger& log) {
  return detail::guarded(log, [&] {
    RunConfig cfg = detail::resolve_config(opt);
    if (opt.seed) cfg.generator.seed = *opt.seed;
    detail::validate_config(cfg);
    if (opt.out.empty()) throw ConfigError("--out is required");
    const GeneratorConfig& g = cfg.generator;
    Dataset train, test;
    std::optional<Model> truth;
    if (g.kind == "synthetic") {
      SyntheticSpec spec = synthetic_spec(g);
      try {
        spec.validate();
      } catch (const ContractViolation& e) {
        throw ConfigError(std::string("[generator] ") + e.what());
      }
      GeneratedData gd = gen_synthetic(spec);
      train = std::move(gd.train);
      test = std::move(gd.test);
      if (spec.identity_emission)
        truth = Model{identity_flow(spec.obs_dim(), spec.m), gd.truth, spec.obs_dim() > spec.m ? spec.noise_sd : 0.1};
    } else if (g.kind == "cosine") {
      CosineToy toy = gen_cosine_toy(g.cosine_sigma2, g.T, g.n_sequences, g.cosine_stickiness, g.seed);
      train = std::move(toy.data);
      truth = Model{identity_flow(1, 1), toy.truth, 0.1};
    } else {
      const BouncingBallSpec spec = ball_spec(g);
      BouncingBall bb = gen_bouncing_ball_state(spec);
      train = std::move(bb.data);
      test = std::move(bb.test);
      if (!spec.emission_net) truth = Model{identity_flow(2, 2), bb.truth, 0.1};
    }
    write_dataset(opt.out, train);
    out << "event=generated kind=" << g.kind << " path=" << opt.out << " N=" << train.size() << " T=" << train.length()
        << " n=" << train.n << " m=" << train.m << " K=" << train.K << " seed=" << g.seed << '\n';
    if (test.size() > 0) {
      const std::string tp = detail::with_suffix(opt.out, "_test", ".rsds");
      write_dataset(tp, test);
      out << "event=generated split=test path=" << tp << " N=" << test.size() << '\n';
    }
    if (truth) {
      const std::string cp = detail::with_suffix(opt.out, "_truth", ".rsdc");
      save_checkpoint(cp, *truth);
      out << "event=truth_checkpoint path=" << cp << '\n';
    } else {
      log.info("event=notice message=\"no ground-truth checkpoint: the emission is not a flow\"");
    }
    return kExitOk;
  });
}

inline int cmd_train(const CliOptions& opt, std::ostream& out, const Logger& log) {
  return detail::guarded(log, [&] {
    RunConfig cfg = detail::resolve_config(opt);
    if (opt.seed) cfg.train.seed = *opt.seed;
    detail::validate_config(cfg);
    if (opt.out.empty()) throw ConfigError("--out is required");
    const Dataset data = detail::load_data(opt.data);
    if (data.size() == 0) throw DataError("dataset is empty");

    Model model;
    TrainerState state;
    if (!opt.resume.empty()) {
      Checkpoint ck = detail::load_ckpt(opt.resume);
      model = std::move(ck.model);
      state = std::move(ck.state);
      if (model.prior.m != cfg.model.m || model.prior.K != cfg.model.K)
        throw DataError("checkpoint has K=" + std::to_string(model.prior.K) + ", m=" + std::to_string(model.prior.m) +
                        " but the config asks for K=" + std::to_string(cfg.model.K) + ", m=" + std::to_string(cfg.model.m));
    } else {
      if (cfg.model.m > data.n)
        throw DataError("model.m=" + std::to_string(cfg.model.m) + " exceeds the data dimension n=" + std::to_string(data.n));
      model = make_model(cfg.model, data.n);
    }
    if (model.flow.dim() != data.n)
      throw DataError("data has n=" + std::to_string(data.n) + " but the model expects n=" + std::to_string(model.flow.dim()));

    std::ofstream logfile;
    const std::string log_path = opt.log.empty() ? opt.out + ".log" : opt.log;
    logfile.open(log_path, opt.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!logfile) throw ConfigError("cannot write log '" + log_path + "'");
    const auto record = [&](const EpochRecord& rec, const Model& m, const TrainerState& s) {
      std::ostringstream line;
      line << "event=epoch epoch=" << rec.epoch << " step=" << s.step << " loglik=" << fmt(rec.loglik_per_step)
           << " grad_norm=" << fmt(rec.grad_norm) << " rejected=" << rec.rejected << " occupancy=" << join(rec.occupancy)
           << " seconds=" << fmt(rec.seconds);
      logfile << line.str() << '\n';
      logfile.flush();
      log.info(line.str());
      save_checkpoint(opt.out, m, s);
    };
    const TrainReport report = fit(data, cfg.train, model, state, record);
    save_checkpoint(opt.out, model, state);
    if (report.diverged) {
      logfile << "event=diverged message=\"" << report.diagnostic << "\"\n";
      log.error("event=diverged message=\"" + report.diagnostic + "\" checkpoint=" + opt.out);
      return kExitDiverged;
    }
    out << "event=trained checkpoint=" << opt.out << " epochs=" << state.epoch << " steps=" << state.step
        << " loglik=" << fmt(report.epochs.empty() ? 0.0 : report.epochs.back().loglik_per_step) << '\n';
    return kExitOk;
  });
}

/// Report keys: sequences, steps, loglik_per_step, mcc, f1, permutation.
inline int cmd_eval(const CliOptions& opt, std::ostream& out, const Logger& log) {
  return detail::guarded(log, [&] {
    const Checkpoint ck = detail::load_ckpt(opt.checkpoint);
    const Dataset data = detail::load_data(opt.data);
    const EvalReport r = evaluate(ck.model, data);
    for (const auto& n : r.notices) log.warn("event=notice message=\"" + n + "\"");
    std::ostringstream rep;
    rep << "sequences=" << r.sequences << "\nsteps=" << r.steps << "\nloglik_per_step=" << fmt(r.loglik_per_step) << '\n';
    if (r.mcc) rep << "mcc=" << fmt(*r.mcc) << '\n';
    if (r.f1) {
      rep << "f1=" << fmt(*r.f1) << "\npermutation=";
      for (std::size_t i = 0; i < r.true_of_est.size(); ++i) rep << (i ? "," : "") << r.true_of_est[i] + 1;
      rep << '\n';
    }
    out << rep.str();
    if (!opt.out.empty()) detail::write_file(opt.out, rep.str());
    return kExitOk;
  });
}

namespace detail {

inline std::vector<std::vector<double>> probe_grid(std::size_t m, double lo, double hi, std::size_t points) {
  require(points >= 1, "probe grid needs at least one point per dimension");
  std::size_t total = 1;
  for (std::size_t i = 0; i < m; ++i) {
    total *= points;
    if (total > 100000) throw ConfigError("probe grid too large; lower eval.probe_points");
  }
  std::vector<std::vector<double>> grid;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::vector<double> z(m);
    std::size_t rem = idx;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = rem % points;
      rem /= points;
      z[i] = points == 1 ? lo : lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(points - 1);
    }
    grid.push_back(std::move(z));
  }
  return grid;
}

inline std::vector<double> parse_numbers(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& item : split(s, ',')) {
    try {
      out.push_back(parse_value<double>(item));
    } catch (const ConfigError&) {
      throw ConfigError(what + ": bad number '" + item + "'");
    }
  }
  return out;
}

inline std::vector<Eigen::MatrixXd> read_covariances(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open covariance file '" + path + "'");
  std::size_t K = 0, m = 0;
  if (!(in >> K >> m) || K < 2 || m < 1) throw DataError(path + ": expected a header 'K m' with K >= 2");
  std::vector<Eigen::MatrixXd> covs(K, Eigen::MatrixXd(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m)));
  for (auto& c : covs)
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      for (Eigen::Index j = 0; j < c.cols(); ++j)
        if (!(in >> c(i, j))) throw DataError(path + ": truncated covariance data");
  return covs;
}

inline void report_ratios(std::ostream& out, const RatioMatrix& R, double tol) {
  for (std::size_t row = 0; row < R.pairs.size(); ++row) {
    out << "ratio pair=" << R.pairs[row].first + 1 << "," << R.pairs[row].second + 1 << " values=";
    for (Eigen::Index i = 0; i < R.R.cols(); ++i) out << (i ? "," : "") << fmt(R.R(static_cast<Eigen::Index>(row), i));
    out << '\n';
  }
  const double d = R.R.rows() ? R.min_column_distance() : 0.0;
  out << "ratio_columns min_distance=" << fmt(d) << " distinct=" << (R.R.rows() > 0 && d > tol ? "true" : "false") << '\n';
}

}  // namespace detail

/// Assumption checks and margins for a checkpoint, a dominance horizon and
/// optional ratio-matrix / disentanglement reports from [eval] inputs.
inline int cmd_theory(const CliOptions& opt, std::ostream& out, const Logger& log) {
  return detail::guarded(log, [&] {
    const RunConfig cfg = detail::resolve_config(opt);
    detail::validate_config(cfg);
    const EvalConfig& e = cfg.eval;
    std::ostringstream rep;
    double margin = e.margin;
    double stickiness = e.stickiness;
    double odds = e.initial_odds;
    std::size_t K = 0;
    if (!opt.checkpoint.empty()) {
      const Checkpoint ck = detail::load_ckpt(opt.checkpoint);
      const RmsmParams& p = ck.model.prior;
      K = p.K;
      const auto probes = detail::probe_grid(p.m, e.probe_lo, e.probe_hi, e.probe_points);
      const AssumptionReport a = check_assumptions(p, probes, e.tolerance);
      rep << "sticky min_self_transition=" << fmt(a.min_self_transition) << " stickiness=" << fmt(a.implied_stickiness)
          << " probes=" << probes.size() << '\n';
      for (std::size_t k = 0; k < p.K; ++k) {
        rep << "variance_dominance regime=" << k + 1 << " holds=" << (a.variance_dominance[k] ? "true" : "false");
        if (a.variance_dominance[k]) rep << " dimension=" << a.dominant_dimension[k] + 1;
        rep << '\n';
      }
      rep << "jacobian max_abs_det=" << fmt(a.max_abs_jacobian_det) << " regime=" << a.jacobian_regime + 1
          << " z=" << join(a.jacobian_point) << '\n';
      if (p.K >= 2) detail::report_ratios(rep, a.ratios, e.tolerance);
      // Margin of every regime at every probe; the model-derived l* follows the
      // best-separated regime at each probe and takes the worst probe.
      double derived = std::numeric_limits<double>::infinity();
      for (const auto& z : probes) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < p.K; ++k) {
          const double g = gaussian_margin(p, z, k);
          best = std::max(best, g);
          rep << "margin regime=" << k + 1 << " z=" << join(z) << " value=" << fmt(g) << '\n';
        }
        derived = std::min(derived, best);
      }
      if (margin <= 0.0) margin = derived;
      if (stickiness < 0.0) stickiness = a.implied_stickiness;
    }
    if (odds < 0.0 && K >= 1) odds = uniform_initial_odds(K);
    if (K == 1) {
      rep << "dominance trivial=true horizon=1 reason=single_regime\n";
    } else if (margin > 0.0 && std::isfinite(margin) && stickiness >= 0.0 && stickiness < 0.5 && odds > 0.0) {
      const DominanceReport d = dominance_horizon(odds, margin, stickiness);
      rep << "dominance margin=" << fmt(d.margin) << " stickiness=" << fmt(d.stickiness) << " initial_odds=" << fmt(d.initial_odds)
          << " a=" << fmt(d.a) << " odds_floor=" << fmt(d.floor) << " horizon=" << (d.reachable ? std::to_string(d.horizon) : "unreachable")
          << " premise_violated=" << (d.premise_violated ? "true" : "false") << " one_step=" << (d.one_step ? "true" : "false")
          << '\n';
    } else {
      rep << "dominance skipped=true reason=\"need margin > 0, stickiness in [0, 0.5) and initial odds > 0\"\n";
    }
    if (!e.sigmas.empty()) {
      std::vector<std::vector<double>> rows;
      for (const auto& r : detail::split(e.sigmas, ';')) rows.push_back(detail::parse_numbers(r, "eval.sigmas"));
      const std::size_t m = rows.front().size();
      std::vector<double> flat;
      for (const auto& r : rows) {
        if (r.size() != m) throw ConfigError("eval.sigmas: every regime needs the same number of values");
        flat.insert(flat.end(), r.begin(), r.end());
      }
      if (rows.size() < 2) throw ConfigError("eval.sigmas: need at least two regimes");
      detail::report_ratios(rep, ratio_matrix(flat, rows.size(), m), e.tolerance);
    }
    if (!e.covariances.empty()) {
      const DisentangleResult d = recover_disentanglement(detail::read_covariances(e.covariances), e.tolerance);
      rep << "disentangle full=" << (d.full ? "true" : "false") << " residual=" << fmt(d.residual)
          << " primary_pair=" << d.primary_pair.first + 1 << "," << d.primary_pair.second + 1 << " blocks=";
      for (std::size_t b = 0; b < d.blocks.size(); ++b) {
        rep << (b ? ";" : "");
        for (std::size_t j = 0; j < d.blocks[b].size(); ++j) rep << (j ? "," : "") << d.blocks[b][j] + 1;
      }
      rep << '\n';
      for (Eigen::Index i = 0; i < d.A_prime.rows(); ++i) {
        rep << "a_prime row=" << i + 1 << " values=";
        for (Eigen::Index j = 0; j < d.A_prime.cols(); ++j) rep << (j ? "," : "") << fmt(d.A_prime(i, j));
        rep << '\n';
      }
    }
    out << rep.str();
    if (!opt.out.empty()) detail::write_file(opt.out, rep.str());
    return kExitOk;
  });
}

/// Predictions file: one line per (sequence, step) with the predicted
/// observation and regime (1-based).
inline int cmd_forecast(const CliOptions& opt, std::ostream& out, const Logger& log) {
  return detail::guarded(log, [&] {
    const RunConfig cfg = detail::resolve_config(opt);
    detail::validate_config(cfg);
    const Checkpoint ck = detail::load_ckpt(opt.checkpoint);
    const Dataset data = detail::load_data(opt.data);
    const EvalConfig& e = cfg.eval;
    const ForecastMode mode = e.mode == "mc" ? ForecastMode::MonteCarlo : ForecastMode::Map;
    const ForecastReport r = forecast_dataset(ck.model, data, e.context, e.horizon, mode, e.samples, opt.seed.value_or(0));
    if (r.skipped)
      log.warn("event=notice message=\"skipped " + std::to_string(r.skipped) + " sequences shorter than context + horizon\"");
    if (!opt.out.empty()) {
      std::ostringstream pf;
      pf << "# sequence,step,regime,x1..xn\n";
      for (std::size_t u = 0; u < r.used; ++u)
        for (Eigen::Index h = 0; h < r.predictions[u].rows(); ++h) {
          pf << r.used_index[u] << ',' << e.context + static_cast<std::size_t>(h) << ',' << r.predicted_regimes[u][static_cast<std::size_t>(h)] + 1;
          for (Eigen::Index j = 0; j < r.predictions[u].cols(); ++j) pf << ',' << fmt(r.predictions[u](h, j));
          pf << '\n';
        }
      detail::write_file(opt.out, pf.str());
    }
    out << "sequences=" << r.used << "\nskipped=" << r.skipped << "\ncontext=" << e.context << "\nhorizon=" << e.horizon
        << "\nmode=" << e.mode << "\nmse=" << fmt(r.mse) << "\nmse_per_step=" << join(r.mse_per_step) << '\n';
    if (r.input_f1) out << "input_f1=" << fmt(*r.input_f1) << '\n';
    if (r.pred_f1) out << "pred_f1=" << fmt(*r.pred_f1) << '\n';
    return kExitOk;
  });
}

}  // namespace rsds

#endif  // RSDS_CLI_HPP
