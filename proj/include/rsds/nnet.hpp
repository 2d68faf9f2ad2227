#ifndef RSDS_NNET_HPP
#define RSDS_NNET_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/rng.hpp"

namespace rsds {

enum class Activation { Cosine, LeakyRelu, Gelu, Identity };

inline constexpr double kLeakySlope = 0.2;

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Cosine: return "cosine";
    case Activation::LeakyRelu: return "leaky_relu";
    case Activation::Gelu: return "gelu";
    case Activation::Identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "cosine" || s == "cos") return Activation::Cosine;
  if (s == "leaky_relu" || s == "leaky") return Activation::LeakyRelu;
  if (s == "gelu") return Activation::Gelu;
  if (s == "identity" || s == "linear") return Activation::Identity;
  throw ParseError("unknown activation '" + std::string(s) + "'");
}

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::Cosine: return std::cos(x);
    case Activation::LeakyRelu: return x > 0.0 ? x : kLeakySlope * x;
    case Activation::Gelu: return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    case Activation::Identity: return x;
  }
  return x;
}

inline double activate_grad(Activation a, double x) {
  switch (a) {
    case Activation::Cosine: return -std::sin(x);
    case Activation::LeakyRelu: return x > 0.0 ? 1.0 : kLeakySlope;
    case Activation::Gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

}  // namespace detail

/// Affine map y = W x + b, W stored row-major (out x in). A non-empty mask
/// pins the weights where it is 0 to exactly zero.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
  std::vector<std::uint8_t> mask;

  double& w(std::size_t o, std::size_t i) { return weight[o * in + i]; }
  double w(std::size_t o, std::size_t i) const { return weight[o * in + i]; }
  bool masked() const { return !mask.empty(); }
};

/// Activations recorded by one forward pass; reuse a tape across calls to
/// avoid reallocation.
struct MlpTape {
  std::vector<std::vector<double>> inputs;  // input to each layer
  std::vector<std::vector<double>> pre;     // pre-activation of each layer
};

/// Dense feed-forward network. Hidden layers apply their activation; the
/// output layer is affine. An Mlp of zeros with the same shape doubles as
/// the gradient accumulator for backward().
class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialised network with `widths` = {in, hidden..., out}.
  Mlp(const std::vector<std::size_t>& widths, Activation hidden)
      : Mlp(widths, std::vector<Activation>(widths.size() >= 2 ? widths.size() - 2 : 0, hidden)) {}

  Mlp(const std::vector<std::size_t>& widths, std::vector<Activation> hidden)
      : activations_(std::move(hidden)) {
    require(widths.size() >= 2, "Mlp: need at least input and output widths");
    require(activations_.size() == widths.size() - 2, "Mlp: one activation per hidden layer");
    for (std::size_t wdt : widths) require(wdt > 0, "Mlp: widths must be positive");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      DenseLayer layer;
      layer.in = widths[l];
      layer.out = widths[l + 1];
      layer.weight.assign(layer.in * layer.out, 0.0);
      layer.bias.assign(layer.out, 0.0);
      layers_.push_back(std::move(layer));
    }
  }

  std::size_t in_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
  std::size_t out_dim() const { return layers_.empty() ? 0 : layers_.back().out; }
  std::size_t num_layers() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    if (layers_.empty()) return w;
    w.push_back(layers_.front().in);
    for (const auto& l : layers_) w.push_back(l.out);
    return w;
  }

  const std::vector<Activation>& activations() const { return activations_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  DenseLayer& layer(std::size_t l) { return layers_.at(l); }
  const DenseLayer& layer(std::size_t l) const { return layers_.at(l); }

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), same for biases; drawn
  /// layer by layer, weights before biases.
  void init_uniform(Rng& rng) {
    for (auto& layer : layers_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
      for (double& v : layer.weight) v = rng.uniform(-bound, bound);
      for (double& v : layer.bias) v = rng.uniform(-bound, bound);
    }
    apply_masks();
  }

  void set_mask(std::size_t l, std::vector<std::uint8_t> mask) {
    auto& layer = layers_.at(l);
    require(mask.empty() || mask.size() == layer.weight.size(), "Mlp::set_mask: shape mismatch");
    layer.mask = std::move(mask);
    apply_masks();
  }

  void apply_masks() {
    for (auto& layer : layers_) {
      if (!layer.masked()) continue;
      for (std::size_t i = 0; i < layer.weight.size(); ++i)
        if (!layer.mask[i]) layer.weight[i] = 0.0;
    }
  }

  /// Same architecture and masks, all parameters zero.
  Mlp zeros_like() const {
    Mlp z = *this;
    for (auto& layer : z.layers_) {
      std::fill(layer.weight.begin(), layer.weight.end(), 0.0);
      std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
    return z;
  }

  void set_zero() {
    for (auto& layer : layers_) {
      std::fill(layer.weight.begin(), layer.weight.end(), 0.0);
      std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
  }

  /// Forward pass without recording.
  std::vector<double> operator()(std::span<const double> input) const {
    MlpTape tape;
    return forward(input, tape);
  }

  std::vector<double> forward(std::span<const double> input, MlpTape& tape) const {
    require(!layers_.empty(), "Mlp::forward: empty network");
    require(input.size() == in_dim(), "Mlp::forward: input has length " + std::to_string(input.size()) +
                                          ", expected " + std::to_string(in_dim()));
    tape.inputs.resize(layers_.size());
    tape.pre.resize(layers_.size());
    tape.inputs[0].assign(input.begin(), input.end());
    std::vector<double> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const DenseLayer& layer = layers_[l];
      const std::vector<double>& x = tape.inputs[l];
      std::vector<double>& z = tape.pre[l];
      z.resize(layer.out);
      for (std::size_t o = 0; o < layer.out; ++o) {
        double acc = layer.bias[o];
        const double* row = layer.weight.data() + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) acc += row[i] * x[i];
        z[o] = acc;
      }
      if (l + 1 < layers_.size()) {
        std::vector<double>& next = tape.inputs[l + 1];
        next.resize(layer.out);
        const Activation act = activations_[l];
        for (std::size_t o = 0; o < layer.out; ++o) next[o] = detail::activate(act, z[o]);
      } else {
        out = z;
      }
    }
    return out;
  }

  /// Reverse pass. Adds parameter gradients into `grads` (when non-null,
  /// must share this network's shape) and returns d(output_grad . y)/dx.
  std::vector<double> backward(const MlpTape& tape, std::span<const double> output_grad, Mlp* grads) const {
    require(tape.inputs.size() == layers_.size() && tape.pre.size() == layers_.size(),
            "Mlp::backward: stale tape (layer count mismatch)");
    require(output_grad.size() == out_dim(), "Mlp::backward: output gradient has wrong length");
    if (grads) require(grads->layers_.size() == layers_.size(), "Mlp::backward: gradient shape mismatch");
    std::vector<double> delta(output_grad.begin(), output_grad.end());
    std::vector<double> upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const DenseLayer& layer = layers_[l];
      const std::vector<double>& x = tape.inputs[l];
      require(x.size() == layer.in && tape.pre[l].size() == layer.out, "Mlp::backward: stale tape (width mismatch)");
      if (l + 1 < layers_.size()) {
        const Activation act = activations_[l];
        for (std::size_t o = 0; o < layer.out; ++o) delta[o] *= detail::activate_grad(act, tape.pre[l][o]);
      }
      if (grads) {
        DenseLayer& g = grads->layers_[l];
        for (std::size_t o = 0; o < layer.out; ++o) {
          const double d = delta[o];
          g.bias[o] += d;
          if (d == 0.0) continue;
          double* grow = g.weight.data() + o * layer.in;
          if (layer.masked()) {
            const std::uint8_t* mrow = layer.mask.data() + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i)
              if (mrow[i]) grow[i] += d * x[i];
          } else {
            for (std::size_t i = 0; i < layer.in; ++i) grow[i] += d * x[i];
          }
        }
      }
      upstream.assign(layer.in, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = layer.weight.data() + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) upstream[i] += row[i] * d;
      }
      delta.swap(upstream);
    }
    return delta;
  }

  /// Jacobian d y / d x, rows indexed by outputs.
  Eigen::MatrixXd jacobian(std::span<const double> input) const {
    MlpTape tape;
    forward(input, tape);
    Eigen::MatrixXd jac(out_dim(), in_dim());
    std::vector<double> unit(out_dim(), 0.0);
    for (std::size_t o = 0; o < out_dim(); ++o) {
      unit[o] = 1.0;
      const std::vector<double> row = backward(tape, unit, nullptr);
      for (std::size_t i = 0; i < in_dim(); ++i) jac(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) = row[i];
      unit[o] = 0.0;
    }
    return jac;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.activations_ != b.activations_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
      const auto& x = a.layers_[l];
      const auto& y = b.layers_[l];
      if (x.in != y.in || x.out != y.out || x.weight != y.weight || x.bias != y.bias || x.mask != y.mask) return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer> layers_;
  std::vector<Activation> activations_;
};

/// Convenience constructor for a seeded random network.
inline Mlp make_random_mlp(const std::vector<std::size_t>& widths, Activation hidden, Rng& rng) {
  Mlp net(widths, hidden);
  net.init_uniform(rng);
  return net;
}

}  // namespace rsds

#endif  // RSDS_NNET_HPP
