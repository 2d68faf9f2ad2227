#ifndef RSDS_CHECKPOINT_HPP
#define RSDS_CHECKPOINT_HPP

// RSDC checkpoint: magic "RSDC", u16 version, a key=value architecture
// descriptor, named shape-prefixed float64 tensors, the step and epoch
// counters and the optimiser RNG state. Loading rebuilds the model from the
// descriptor alone, so any flow stack or rMSM the library can represent
// round-trips bit-exactly.

#include <map>
#include <string>
#include <vector>

#include "rsds/dataset.hpp"
#include "rsds/error.hpp"
#include "rsds/trainer.hpp"

namespace rsds {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  TrainerState state;
};

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t at = 0;
  while (at <= s.size() && !s.empty()) {
    const auto comma = s.find(',', at);
    const std::string item = s.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw ParseError("checkpoint descriptor: bad integer list '" + s + "'");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

inline std::string join_activations(const std::vector<Activation>& acts) {
  std::string out;
  for (std::size_t i = 0; i < acts.size(); ++i) out += (i ? "," : "") + std::string(to_string(acts[i]));
  return out;
}

inline std::vector<Activation> split_activations(const std::string& s) {
  std::vector<Activation> out;
  if (s.empty() || s == "none") return out;
  std::size_t at = 0;
  for (;;) {
    const auto comma = s.find(',', at);
    out.push_back(activation_from_string(s.substr(at, comma == std::string::npos ? std::string::npos : comma - at)));
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

inline void describe_mlp(std::map<std::string, std::string>& d, const std::string& prefix, const Mlp& net) {
  d[prefix + ".widths"] = join_sizes(net.widths());
  d[prefix + ".activations"] = net.activations().empty() ? "none" : join_activations(net.activations());
}

inline const std::string& lookup(const std::map<std::string, std::string>& d, const std::string& key) {
  const auto it = d.find(key);
  if (it == d.end()) throw ParseError("checkpoint descriptor: missing key '" + key + "'");
  return it->second;
}

inline Mlp build_mlp(const std::map<std::string, std::string>& d, const std::string& prefix) {
  return Mlp(split_sizes(lookup(d, prefix + ".widths")), split_activations(lookup(d, prefix + ".activations")));
}

struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

/// Named tensors that fully determine a model's state, parameters first.
template <class Fn>
void visit_state_tensors(Model& model, Fn&& fn) {
  fn("sigma_eps", std::span<double>(&model.sigma_eps, 1));
  for_each_flow_param(model.flow, "flow.", [&](const std::string& name, std::span<double> v) { fn(name, v); });
  for_each_rmsm_param(model.prior, "rmsm.", [&](const std::string& name, std::span<double> v, bool) { fn(name, v); });
}

template <class T>
std::vector<double> to_doubles(const std::vector<T>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline std::vector<std::size_t> to_indices(const std::vector<double>& v, std::size_t bound, const std::string& name) {
  std::vector<std::size_t> out;
  for (double x : v) {
    if (!(x >= 0.0) || x >= static_cast<double>(bound) || x != std::floor(x))
      throw ParseError("checkpoint tensor '" + name + "' holds an invalid index");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

/// Masks, permutations and signs: fixed state outside the trainable set.
inline void collect_fixed(const Model& model, std::map<std::string, Tensor>& out) {
  const auto& layers = model.flow.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "flow.layer" + std::to_string(i);
    if (const auto* lu = std::get_if<LuMixing>(&layers[i])) {
      out[base + ".perm"] = {{lu->n}, to_doubles(lu->perm)};
      out[base + ".sign"] = {{lu->n}, lu->sign};
    } else if (const auto* p = std::get_if<Permutation>(&layers[i])) {
      out[base + ".perm"] = {{p->perm.size()}, to_doubles(p->perm)};
    }
  }
  auto masks = [&](const Mlp& net, const std::string& prefix) {
    for (std::size_t l = 0; l < net.num_layers(); ++l)
      if (net.layer(l).masked())
        out[prefix + ".layer" + std::to_string(l) + ".mask"] = {{net.layer(l).out, net.layer(l).in},
                                                                 to_doubles(net.layer(l).mask)};
  };
  for (std::size_t k = 0; k < model.prior.transition_nets.size(); ++k)
    masks(model.prior.transition_nets[k], "rmsm.transition." + std::to_string(k));
  if (const auto* r = std::get_if<RecurrentSwitch>(&model.prior.switching)) masks(r->net, "rmsm.switch");
}

}  // namespace detail

inline std::map<std::string, std::string> describe_model(const Model& model) {
  std::map<std::string, std::string> d;
  d["flow.n"] = std::to_string(model.flow.dim());
  d["flow.m"] = std::to_string(model.flow.latent_dim());
  std::string kinds;
  const auto& layers = model.flow.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "flow.layer" + std::to_string(i);
    if (std::holds_alternative<LuMixing>(layers[i])) {
      kinds += (i ? "," : "") + std::string("lu");
    } else if (std::holds_alternative<Permutation>(layers[i])) {
      kinds += (i ? "," : "") + std::string("permutation");
    } else {
      kinds += (i ? "," : "") + std::string("coupling");
      detail::describe_mlp(d, base + ".net", std::get<Coupling>(layers[i]).net);
    }
  }
  d["flow.layers"] = kinds.empty() ? "none" : kinds;
  d["rmsm.K"] = std::to_string(model.prior.K);
  d["rmsm.m"] = std::to_string(model.prior.m);
  d["rmsm.transition_mean"] = model.prior.residual ? "residual" : "direct";
  for (std::size_t k = 0; k < model.prior.transition_nets.size(); ++k)
    detail::describe_mlp(d, "rmsm.transition." + std::to_string(k), model.prior.transition_nets[k]);
  if (const auto* r = std::get_if<RecurrentSwitch>(&model.prior.switching)) {
    d["rmsm.switching"] = "recurrent";
    detail::describe_mlp(d, "rmsm.switch", r->net);
  } else {
    d["rmsm.switching"] = "autonomous";
  }
  return d;
}

/// Model skeleton (zero parameters) from a descriptor.
inline Model build_model(const std::map<std::string, std::string>& d) {
  using detail::lookup;
  Model model;
  std::size_t n = 0, m = 0, K = 0, pm = 0;
  try {
    n = std::stoull(lookup(d, "flow.n"));
    m = std::stoull(lookup(d, "flow.m"));
    K = std::stoull(lookup(d, "rmsm.K"));
    pm = std::stoull(lookup(d, "rmsm.m"));
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception&) {
    throw ParseError("checkpoint descriptor: malformed dimension field");
  }
  if (m != pm) throw ParseError("checkpoint descriptor: flow latent dim differs from rmsm.m");
  model.flow = FlowStack(n, m);
  const std::string kinds = lookup(d, "flow.layers");
  if (kinds != "none") {
    std::size_t at = 0, i = 0;
    for (;; ++i) {
      const auto comma = kinds.find(',', at);
      const std::string kind = kinds.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
      if (kind == "lu") {
        model.flow.add(LuMixing::identity(n));
      } else if (kind == "permutation") {
        Permutation p;
        p.perm.resize(n);
        std::iota(p.perm.begin(), p.perm.end(), 0);
        model.flow.add(std::move(p));
      } else if (kind == "coupling") {
        Mlp net = detail::build_mlp(d, "flow.layer" + std::to_string(i) + ".net");
        const std::size_t c = net.in_dim();
        model.flow.add(Coupling{n, c, std::move(net), 1.0});
      } else {
        throw ParseError("checkpoint descriptor: unknown flow layer kind '" + kind + "'");
      }
      if (comma == std::string::npos) break;
      at = comma + 1;
    }
  }
  RmsmParams& p = model.prior;
  p.K = K;
  p.m = m;
  p.initial_logits.assign(K, 0.0);
  p.initial_means.assign(K * m, 0.0);
  p.initial_log_sigmas.assign(K * m, 0.0);
  p.transition_log_sigmas.assign(K * m, 0.0);
  for (std::size_t k = 0; k < K; ++k) p.transition_nets.push_back(detail::build_mlp(d, "rmsm.transition." + std::to_string(k)));
  if (const auto it = d.find("rmsm.transition_mean"); it != d.end()) {
    if (it->second != "residual" && it->second != "direct")
      throw ParseError("checkpoint descriptor: unknown transition mean kind '" + it->second + "'");
    p.residual = it->second == "residual";
  }
  const std::string sw = lookup(d, "rmsm.switching");
  if (sw == "recurrent") {
    p.switching = RecurrentSwitch{detail::build_mlp(d, "rmsm.switch")};
  } else if (sw == "autonomous") {
    p.switching = AutonomousSwitch{std::vector<double>(K * K, 0.0)};
  } else {
    throw ParseError("checkpoint descriptor: unknown switching kind '" + sw + "'");
  }
  return model;
}

inline std::string serialize_checkpoint(const Model& model_in, const TrainerState& state) {
  Model model = model_in;
  model.prior.validate();
  std::string out = "RSDC";
  detail::put<std::uint16_t>(out, kCheckpointVersion);
  std::map<std::string, std::string> desc = describe_model(model);
  desc["train.initialised"] = state.initialised ? "true" : "false";
  const std::string text = metadata_text(desc);
  detail::put<std::uint64_t>(out, text.size());
  out += text;

  std::vector<std::pair<std::string, detail::Tensor>> tensors;
  detail::visit_state_tensors(model, [&](const std::string& name, std::span<double> v) {
    tensors.push_back({name, {{v.size()}, {v.begin(), v.end()}}});
  });
  std::map<std::string, detail::Tensor> fixed;
  detail::collect_fixed(model, fixed);
  for (auto& [name, t] : fixed) tensors.emplace_back(name, std::move(t));
  if (!state.adam_m.empty()) {
    tensors.push_back({"adam.m", {{state.adam_m.size()}, state.adam_m}});
    tensors.push_back({"adam.v", {{state.adam_v.size()}, state.adam_v}});
  }
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto s : t.shape) detail::put<std::uint64_t>(out, s);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
  }
  detail::put<std::uint64_t>(out, state.step);
  detail::put<std::uint64_t>(out, state.epoch);
  const std::string rng = state.rng.serialize();
  detail::put<std::uint64_t>(out, rng.size());
  out += rng;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.str(4, "magic") != "RSDC") throw ParseError("bad magic at byte offset 0: expected 'RSDC'");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  const auto desc_len = r.get<std::uint64_t>("descriptor length");
  std::map<std::string, std::string> desc;
  {
    std::istringstream in(r.str(static_cast<std::size_t>(desc_len), "descriptor"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("checkpoint descriptor: malformed line '" + line + "'");
      desc[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  Checkpoint ck;
  ck.model = build_model(desc);
  ck.state.initialised = detail::lookup(desc, "train.initialised") == "true";

  std::map<std::string, detail::Tensor> tensors;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    detail::Tensor t;
    const auto rank = r.get<std::uint32_t>("tensor rank");
    std::uint64_t size = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.get<std::uint64_t>("tensor shape"));
      size *= t.shape.back();
    }
    if (size > bytes.size() / 8) throw ParseError("checkpoint tensor '" + name + "' is larger than the file");
    t.data.resize(static_cast<std::size_t>(size));
    r.bytes(t.data.data(), t.data.size() * 8, "tensor payload");
    tensors[name] = std::move(t);
  }
  auto take = [&](const std::string& name, std::size_t expected) -> std::vector<double>& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint: missing tensor '" + name + "'");
    if (it->second.data.size() != expected)
      throw ParseError("checkpoint: tensor '" + name + "' has " + std::to_string(it->second.data.size()) +
                       " values, expected " + std::to_string(expected));
    return it->second.data;
  };
  detail::visit_state_tensors(ck.model, [&](const std::string& name, std::span<double> v) {
    const auto& src = take(name, v.size());
    std::copy(src.begin(), src.end(), v.begin());
  });
  auto& layers = ck.model.flow.layers();
  const std::size_t n = ck.model.flow.dim();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "flow.layer" + std::to_string(i);
    if (auto* lu = std::get_if<LuMixing>(&layers[i])) {
      lu->perm = detail::to_indices(take(base + ".perm", n), n, base + ".perm");
      lu->sign = take(base + ".sign", n);
    } else if (auto* p = std::get_if<Permutation>(&layers[i])) {
      p->perm = detail::to_indices(take(base + ".perm", n), n, base + ".perm");
    }
  }
  auto masks = [&](Mlp& net, const std::string& prefix) {
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const auto it = tensors.find(prefix + ".layer" + std::to_string(l) + ".mask");
      if (it == tensors.end()) continue;
      const auto& src = take(it->first, net.layer(l).in * net.layer(l).out);
      net.set_mask(l, std::vector<std::uint8_t>(src.begin(), src.end()));
    }
  };
  for (std::size_t k = 0; k < ck.model.prior.transition_nets.size(); ++k)
    masks(ck.model.prior.transition_nets[k], "rmsm.transition." + std::to_string(k));
  if (auto* rs = std::get_if<RecurrentSwitch>(&ck.model.prior.switching)) masks(rs->net, "rmsm.switch");
  if (tensors.count("adam.m")) {
    ck.state.adam_m = tensors["adam.m"].data;
    ck.state.adam_v = take("adam.v", ck.state.adam_m.size());
  }
  ck.state.step = static_cast<std::size_t>(r.get<std::uint64_t>("step counter"));
  ck.state.epoch = static_cast<std::size_t>(r.get<std::uint64_t>("epoch counter"));
  const auto rng_len = r.get<std::uint64_t>("rng length");
  ck.state.rng.deserialize(r.str(static_cast<std::size_t>(rng_len), "rng state"));
  if (!r.done()) throw ParseError("trailing bytes after rng state at byte offset " + std::to_string(r.pos()));
  ck.model.prior.validate();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Model& model, const TrainerState& state = {}) {
  detail::write_file(path, serialize_checkpoint(model, state));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(detail::read_file(path)); }

}  // namespace rsds

#endif  // RSDS_CHECKPOINT_HPP
