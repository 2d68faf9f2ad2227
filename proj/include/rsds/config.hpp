#ifndef RSDS_CONFIG_HPP
#define RSDS_CONFIG_HPP

// Run configuration: INI-like text with [generator], [model], [train] and
// [eval] sections, key = value lines and '#' comments. Every key is listed
// in one registry, which drives parsing, command-line overrides and
// serialisation.

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rsds/datagen.hpp"
#include "rsds/error.hpp"
#include "rsds/flow.hpp"
#include "rsds/nnet.hpp"
#include "rsds/trainer.hpp"

namespace rsds {

/// Configuration error; `line` is 0 when the problem is not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct GeneratorConfig {
  std::string kind = "synthetic";  // synthetic | cosine | ball
  SyntheticSpec synthetic;
  double cosine_sigma2 = 0.1;
  double cosine_stickiness = 0.1;
  BouncingBallSpec ball;
  std::size_t n_sequences = 10000;  // training sequences for every generator
  std::size_t n_test = 1000;
  std::size_t T = 100;
  std::size_t test_T = 0;  // 0: test split has length T
  std::uint64_t seed = 0;
};

struct ModelConfig {
  std::size_t K = 3;
  std::size_t m = 3;
  std::vector<std::size_t> transition_hidden{32};
  Activation transition_activation = Activation::Cosine;
  bool transition_residual = false;  // mean z + net(z), output layer started near zero
  bool recurrent = false;
  std::vector<std::size_t> switch_hidden{32};
  Activation switch_activation = Activation::Gelu;
  FlowArchitecture flow;
  double init_stay = 0.9;  // initial self-transition probability; 0 keeps uniform switching
  std::uint64_t init_seed = 0;
};

struct EvalConfig {
  // forecasting
  std::size_t context = 5;
  std::size_t horizon = 36;
  std::string mode = "map";  // map | mc
  std::size_t samples = 1;
  // theory
  double probe_lo = -1.0;
  double probe_hi = 1.0;
  std::size_t probe_points = 5;  // per dimension
  double margin = 0.0;           // > 0 overrides the model-derived margin
  double stickiness = -1.0;      // >= 0 overrides the model-derived stickiness
  double initial_odds = -1.0;    // >= 0 overrides the uniform-prior odds
  std::string sigmas;            // "s11,s12,...;s21,..." standalone ratio-matrix input
  std::string covariances;       // path to whitespace-separated covariance matrices
  double tolerance = 1e-6;
};

struct RunConfig {
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_value(const std::string& v);

template <>
inline double parse_value<double>(const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

template <>
inline bool parse_value<bool>(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

template <>
inline std::string parse_value<std::string>(const std::string& v) {
  return v;
}

template <>
inline std::vector<std::size_t> parse_value<std::vector<std::size_t>>(const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty() || v == "none") return out;
  for (const auto& item : split(v, ',')) out.push_back(static_cast<std::size_t>(parse_value<std::uint64_t>(item)));
  return out;
}

template <>
inline Activation parse_value<Activation>(const std::string& v) {
  try {
    return activation_from_string(v);
  } catch (const std::exception&) {
    throw ConfigError("unknown activation '" + v + "'");
  }
}

template <>
inline MixingKind parse_value<MixingKind>(const std::string& v) {
  if (v == "lu") return MixingKind::Lu;
  if (v == "permutation") return MixingKind::Permutation;
  throw ConfigError("expected lu or permutation, got '" + v + "'");
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(Activation a) { return std::string(to_string(a)); }
inline std::string format_value(MixingKind k) { return k == MixingKind::Lu ? "lu" : "permutation"; }
inline std::string format_value(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Field make_field(std::string section, std::string key, Access access) {
  using Raw = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  using Stored = std::conditional_t<std::is_same_v<Raw, std::size_t>, std::uint64_t, Raw>;
  Field f;
  f.section = std::move(section);
  f.key = std::move(key);
  f.set = [access](RunConfig& c, const std::string& v) { access(c) = static_cast<Raw>(parse_value<Stored>(v)); };
  f.get = [access](const RunConfig& c) {
    return format_value(static_cast<Stored>(access(const_cast<RunConfig&>(c))));
  };
  return f;
}

#define RSDS_FIELD(sec, key, expr) make_field(sec, key, [](RunConfig& c) -> auto& { return expr; })

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      RSDS_FIELD("generator", "kind", c.generator.kind),
      RSDS_FIELD("generator", "seed", c.generator.seed),
      RSDS_FIELD("generator", "n_sequences", c.generator.n_sequences),
      RSDS_FIELD("generator", "n_test", c.generator.n_test),
      RSDS_FIELD("generator", "T", c.generator.T),
      RSDS_FIELD("generator", "test_T", c.generator.test_T),
      RSDS_FIELD("generator", "m", c.generator.synthetic.m),
      RSDS_FIELD("generator", "K", c.generator.synthetic.K),
      RSDS_FIELD("generator", "n", c.generator.synthetic.n),
      RSDS_FIELD("generator", "stay", c.generator.synthetic.stay),
      RSDS_FIELD("generator", "avg_parents", c.generator.synthetic.avg_parents),
      RSDS_FIELD("generator", "hidden_per_output", c.generator.synthetic.hidden_per_output),
      RSDS_FIELD("generator", "sigma_lo", c.generator.synthetic.sigma_lo),
      RSDS_FIELD("generator", "sigma_hi", c.generator.synthetic.sigma_hi),
      RSDS_FIELD("generator", "ratio_threshold", c.generator.synthetic.ratio_threshold),
      RSDS_FIELD("generator", "noise_sd", c.generator.synthetic.noise_sd),
      RSDS_FIELD("generator", "emission_max_cond", c.generator.synthetic.emission_max_cond),
      RSDS_FIELD("generator", "initial_sd", c.generator.synthetic.initial_sd),
      RSDS_FIELD("generator", "identity_emission", c.generator.synthetic.identity_emission),
      RSDS_FIELD("generator", "cosine_sigma2", c.generator.cosine_sigma2),
      RSDS_FIELD("generator", "cosine_stickiness", c.generator.cosine_stickiness),
      RSDS_FIELD("generator", "ball_box", c.generator.ball.box),
      RSDS_FIELD("generator", "ball_speed", c.generator.ball.speed),
      RSDS_FIELD("generator", "ball_process_noise", c.generator.ball.process_noise),
      RSDS_FIELD("generator", "ball_gain", c.generator.ball.gain),
      RSDS_FIELD("generator", "ball_emission_net", c.generator.ball.emission_net),
      RSDS_FIELD("model", "K", c.model.K),
      RSDS_FIELD("model", "m", c.model.m),
      RSDS_FIELD("model", "transition_hidden", c.model.transition_hidden),
      RSDS_FIELD("model", "transition_activation", c.model.transition_activation),
      RSDS_FIELD("model", "transition_residual", c.model.transition_residual),
      RSDS_FIELD("model", "recurrent", c.model.recurrent),
      RSDS_FIELD("model", "switch_hidden", c.model.switch_hidden),
      RSDS_FIELD("model", "switch_activation", c.model.switch_activation),
      RSDS_FIELD("model", "flow_depth", c.model.flow.depth),
      RSDS_FIELD("model", "coupling_hidden", c.model.flow.coupling_hidden),
      RSDS_FIELD("model", "coupling_activation", c.model.flow.coupling_activation),
      RSDS_FIELD("model", "mixing", c.model.flow.mixing),
      RSDS_FIELD("model", "random_mixing", c.model.flow.random_mixing),
      RSDS_FIELD("model", "init_stay", c.model.init_stay),
      RSDS_FIELD("model", "init_seed", c.model.init_seed),
      RSDS_FIELD("train", "sigma_eps", c.train.sigma_eps),
      RSDS_FIELD("train", "lr_flow", c.train.lr_flow),
      RSDS_FIELD("train", "lr_rmsm", c.train.lr_rmsm),
      RSDS_FIELD("train", "beta1", c.train.beta1),
      RSDS_FIELD("train", "beta2", c.train.beta2),
      RSDS_FIELD("train", "adam_eps", c.train.adam_eps),
      RSDS_FIELD("train", "epochs", c.train.epochs),
      RSDS_FIELD("train", "batch_size", c.train.batch_size),
      RSDS_FIELD("train", "q_freeze_epochs", c.train.q_freeze_epochs),
      RSDS_FIELD("train", "pca_align_weight", c.train.pca_align_weight),
      RSDS_FIELD("train", "pca_align_steps", c.train.pca_align_steps),
      RSDS_FIELD("train", "lr_drop_epoch", c.train.lr_drop_epoch),
      RSDS_FIELD("train", "lr_drop_factor", c.train.lr_drop_factor),
      RSDS_FIELD("train", "sigma_floor", c.train.sigma_floor),
      RSDS_FIELD("train", "pca_init", c.train.pca_init),
      RSDS_FIELD("train", "pca_whiten", c.train.pca_whiten),
      RSDS_FIELD("train", "pca_sigma_spread", c.train.pca_sigma_spread),
      RSDS_FIELD("train", "seed", c.train.seed),
      RSDS_FIELD("train", "threads", c.train.threads),
      RSDS_FIELD("eval", "context", c.eval.context),
      RSDS_FIELD("eval", "horizon", c.eval.horizon),
      RSDS_FIELD("eval", "mode", c.eval.mode),
      RSDS_FIELD("eval", "samples", c.eval.samples),
      RSDS_FIELD("eval", "probe_lo", c.eval.probe_lo),
      RSDS_FIELD("eval", "probe_hi", c.eval.probe_hi),
      RSDS_FIELD("eval", "probe_points", c.eval.probe_points),
      RSDS_FIELD("eval", "margin", c.eval.margin),
      RSDS_FIELD("eval", "stickiness", c.eval.stickiness),
      RSDS_FIELD("eval", "initial_odds", c.eval.initial_odds),
      RSDS_FIELD("eval", "sigmas", c.eval.sigmas),
      RSDS_FIELD("eval", "covariances", c.eval.covariances),
      RSDS_FIELD("eval", "tolerance", c.eval.tolerance),
  };
  return all;
}

#undef RSDS_FIELD

inline const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

}  // namespace detail

/// Sets one `section.key` entry; throws ConfigError on unknown keys or bad values.
inline void set_config_value(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value,
                             std::size_t line = 0) {
  const detail::Field* f = detail::find_field(section, key);
  if (!f) throw ConfigError("unknown key '" + key + "' in section [" + section + "]", line);
  try {
    f->set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(section + "." + key + ": " + e.what(), line);
  }
}

/// Applies an override of the form "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value, got '" + text + "'");
  set_config_value(cfg, detail::trim(text.substr(0, dot)), detail::trim(text.substr(dot + 1, eq - dot - 1)),
                   detail::trim(text.substr(eq + 1)));
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header '" + s + "'", line);
      section = detail::trim(s.substr(1, s.size() - 2));
      if (section != "generator" && section != "model" && section != "train" && section != "eval")
        throw ConfigError("unknown section [" + section + "]", line);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + s + "'", line);
    if (section.empty()) throw ConfigError("key outside of any section", line);
    set_config_value(cfg, section, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)), line);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key of the given sections, in registry order.
inline std::string serialize_config(const RunConfig& cfg,
                                    const std::vector<std::string>& sections = {"generator", "model", "train", "eval"}) {
  std::string out;
  for (const auto& sec : sections) {
    out += "[" + sec + "]\n";
    for (const auto& f : detail::fields())
      if (f.section == sec) out += f.key + " = " + f.get(cfg) + "\n";
    out += "\n";
  }
  return out;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

/// Generator section translated into the synthetic generator's spec.
inline SyntheticSpec synthetic_spec(const GeneratorConfig& g) {
  SyntheticSpec s = g.synthetic;
  s.n_train = g.n_sequences;
  s.n_test = g.n_test;
  s.T = g.T;
  s.T_test = g.test_T;
  s.seed = g.seed;
  return s;
}

inline BouncingBallSpec ball_spec(const GeneratorConfig& g) {
  BouncingBallSpec s = g.ball;
  s.N = g.n_sequences;
  s.n_test = g.n_test;
  s.T = g.T;
  s.T_test = g.test_T;
  s.seed = g.seed;
  return s;
}

/// Builds an untrained model for observation dimension n.
inline Model make_model(const ModelConfig& mc, std::size_t n) {
  require(mc.m >= 1 && mc.m <= n, "make_model: need 1 <= m <= n");
  require(mc.K >= 1, "make_model: K must be positive");
  Rng rng(stream_seed(mc.init_seed, 0));
  Model model{make_flow(n, mc.m, mc.flow, rng),
              make_rmsm(mc.K, mc.m, mc.transition_hidden, mc.transition_activation, mc.recurrent, mc.switch_hidden,
                        mc.switch_activation),
              0.1};
  for (auto& net : model.prior.transition_nets) net.init_uniform(rng);
  if (auto* r = std::get_if<RecurrentSwitch>(&model.prior.switching)) r->net.init_uniform(rng);
  if (mc.transition_residual) {
    model.prior.residual = true;
    for (auto& net : model.prior.transition_nets) {
      auto& last = net.layers().back();
      for (double& w : last.weight) w *= 0.1;
      std::fill(last.bias.begin(), last.bias.end(), 0.0);
    }
  }
  if (mc.init_stay > 0.0) sticky_switch_init(model.prior, mc.init_stay);
  return model;
}

}  // namespace rsds

#endif  // RSDS_CONFIG_HPP
