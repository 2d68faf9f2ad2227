#ifndef RSDS_FLOW_HPP
#define RSDS_FLOW_HPP

// Invertible emission x = f(v), v = (z, eps). Layers are stored in the
// forward (latent -> data) order; inverse() runs them back to front.

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/nnet.hpp"
#include "rsds/rng.hpp"
#include "rsds/types.hpp"

namespace rsds {

/// x = P L U v + b with L unit lower triangular, U upper triangular with
/// diagonal sign_i * exp(log_diag_i). P is stored as an index map:
/// (P y)_i = y[perm[i]].
struct LuMixing {
  std::size_t n = 0;
  std::vector<std::size_t> perm;
  std::vector<double> lower;  // n x n, strict lower part used
  std::vector<double> upper;  // n x n, strict upper part used
  std::vector<double> log_diag;
  std::vector<double> sign;   // +-1, fixed
  std::vector<double> bias;

  static LuMixing identity(std::size_t n) {
    LuMixing l;
    l.n = n;
    l.perm.resize(n);
    std::iota(l.perm.begin(), l.perm.end(), 0);
    l.lower.assign(n * n, 0.0);
    l.upper.assign(n * n, 0.0);
    l.log_diag.assign(n, 0.0);
    l.sign.assign(n, 1.0);
    l.bias.assign(n, 0.0);
    return l;
  }

  /// Factor an invertible W (partial-pivot LU) and set x = W v + b.
  static LuMixing from_matrix(const Eigen::MatrixXd& W, std::span<const double> b) {
    const auto n = static_cast<std::size_t>(W.rows());
    require(W.cols() == W.rows() && b.size() == n, "LuMixing::from_matrix: shape mismatch");
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(W);
    const Eigen::MatrixXd packed = lu.matrixLU();
    // lu.permutationP() * W = L U, so W = P^T L U and (P^T y)_i = y[P^{-1}(i)].
    const auto& indices = lu.permutationP().indices();
    LuMixing l = identity(n);
    for (std::size_t i = 0; i < n; ++i) l.perm[static_cast<std::size_t>(indices[static_cast<Eigen::Index>(i)])] = i;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double v = packed(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (j < i) l.lower[i * n + j] = v;
        if (j > i) l.upper[i * n + j] = v;
        if (i == j) {
          if (v == 0.0) throw NumericalError("LuMixing::from_matrix: singular matrix");
          l.sign[i] = v > 0.0 ? 1.0 : -1.0;
          l.log_diag[i] = std::log(std::abs(v));
        }
      }
    l.bias.assign(b.begin(), b.end());
    return l;
  }

  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd L = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Eigen::MatrixXd U = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
        if (j < i) L(ii, jj) = lower[i * n + j];
        if (j > i) U(ii, jj) = upper[i * n + j];
        if (i == j) U(ii, jj) = diag(i);
      }
    Eigen::MatrixXd LU = L * U;
    Eigen::MatrixXd W(LU.rows(), LU.cols());
    for (std::size_t i = 0; i < n; ++i) W.row(static_cast<Eigen::Index>(i)) = LU.row(static_cast<Eigen::Index>(perm[i]));
    return W;
  }

  double diag(std::size_t i) const { return sign[i] * std::exp(log_diag[i]); }

  double logdet() const {
    double acc = 0.0;
    for (double v : log_diag) acc += v;
    return acc;
  }
};

/// Fixed coordinate shuffle, y_i = v[perm[i]].
struct Permutation {
  std::vector<std::size_t> perm;
};

/// Affine coupling: the first c coordinates pass through and parametrise
/// y2 = x2 * exp(s) + t, s = bound * tanh(raw).
struct Coupling {
  std::size_t n = 0;
  std::size_t c = 0;
  Mlp net;  // c -> 2(n-c): [raw_s, t]
  double bound = 1.0;
};

using FlowLayer = std::variant<LuMixing, Permutation, Coupling>;

/// Values recorded per layer by FlowStack::inverse().
struct FlowTape {
  struct Entry {
    std::vector<double> input;   // data-side value fed to the layer inverse
    std::vector<double> output;  // latent-side value
    std::vector<double> aux;     // LU: intermediate u; coupling: raw_s
    MlpTape net;
  };
  std::vector<Entry> entries;  // indexed like FlowStack::layers
};

enum class MixingKind { Lu, Permutation };

class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(std::size_t n, std::size_t m) : n_(n), m_(m) {
    require(n >= 1 && m >= 1 && m <= n, "FlowStack: need 1 <= m <= n");
  }

  std::size_t dim() const { return n_; }
  std::size_t latent_dim() const { return m_; }
  std::size_t noise_dim() const { return n_ - m_; }
  std::vector<FlowLayer>& layers() { return layers_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }

  void add(FlowLayer layer) {
    std::visit([&](const auto& l) { check_layer(l); }, layer);
    layers_.push_back(std::move(layer));
  }

  /// f(v) and log|det df/dv|.
  std::vector<double> forward(std::span<const double> v, double* logdet = nullptr) const {
    require(v.size() == n_, "FlowStack::forward: input has wrong dimension");
    require(all_finite(v), "FlowStack::forward: non-finite input");
    std::vector<double> cur(v.begin(), v.end());
    double ld = 0.0;
    for (const auto& layer : layers_) ld += std::visit([&](const auto& l) { return layer_forward(l, cur); }, layer);
    if (logdet) *logdet = ld;
    return cur;
  }

  /// f^{-1}(x) and log|det df^{-1}/dx|. With a tape, records what backward() needs.
  std::vector<double> inverse(std::span<const double> x, double* logdet_inv = nullptr, FlowTape* tape = nullptr) const {
    require(x.size() == n_, "FlowStack::inverse: input has wrong dimension");
    std::vector<double> cur(x.begin(), x.end());
    double ld = 0.0;
    if (tape) tape->entries.resize(layers_.size());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      FlowTape::Entry* e = tape ? &tape->entries[i] : nullptr;
      if (e) e->input = cur;
      ld += std::visit([&](const auto& l) { return layer_inverse(l, cur, e); }, layers_[i]);
      if (e) e->output = cur;
    }
    if (logdet_inv) *logdet_inv = ld;
    return cur;
  }

  /// Reverse pass for an inverse() call: given d/dv of the objective and the
  /// weight on logdet_inv, adds parameter gradients into `grads` (same
  /// layout, may be null) and returns d/dx.
  std::vector<double> backward(const FlowTape& tape, std::span<const double> grad_v, double grad_logdet,
                               FlowStack* grads) const {
    require(tape.entries.size() == layers_.size(), "FlowStack::backward: stale tape");
    require(grad_v.size() == n_, "FlowStack::backward: gradient has wrong dimension");
    if (grads) require(grads->layers_.size() == layers_.size(), "FlowStack::backward: gradient shape mismatch");
    std::vector<double> g(grad_v.begin(), grad_v.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const FlowTape::Entry& e = tape.entries[i];
      require(e.input.size() == n_ && e.output.size() == n_, "FlowStack::backward: stale tape");
      if (const auto* lu = std::get_if<LuMixing>(&layers_[i])) {
        g = lu_backward(*lu, e, g, grad_logdet, grads ? &std::get<LuMixing>(grads->layers_[i]) : nullptr);
      } else if (const auto* p = std::get_if<Permutation>(&layers_[i])) {
        std::vector<double> out(n_);
        for (std::size_t j = 0; j < n_; ++j) out[j] = g[p->perm[j]];
        g.swap(out);
      } else {
        const auto& cp = std::get<Coupling>(layers_[i]);
        g = coupling_backward(cp, e, g, grad_logdet, grads ? &std::get<Coupling>(grads->layers_[i]) : nullptr);
      }
    }
    return g;
  }

  FlowStack zeros_like() const {
    FlowStack z = *this;
    for (auto& layer : z.layers_) {
      if (auto* lu = std::get_if<LuMixing>(&layer)) {
        std::fill(lu->lower.begin(), lu->lower.end(), 0.0);
        std::fill(lu->upper.begin(), lu->upper.end(), 0.0);
        std::fill(lu->log_diag.begin(), lu->log_diag.end(), 0.0);
        std::fill(lu->bias.begin(), lu->bias.end(), 0.0);
      } else if (auto* cp = std::get_if<Coupling>(&layer)) {
        cp->net.set_zero();
        cp->bound = 0.0;
      }
    }
    return z;
  }

 private:
  void check_layer(const LuMixing& l) const {
    require(l.n == n_ && l.perm.size() == n_ && l.lower.size() == n_ * n_ && l.upper.size() == n_ * n_ &&
                l.log_diag.size() == n_ && l.sign.size() == n_ && l.bias.size() == n_,
            "FlowStack: LU layer dimension mismatch");
  }
  void check_layer(const Permutation& p) const {
    require(p.perm.size() == n_, "FlowStack: permutation dimension mismatch");
    std::vector<bool> seen(n_, false);
    for (std::size_t v : p.perm) {
      require(v < n_ && !seen[v], "FlowStack: permutation is not a bijection");
      seen[v] = true;
    }
  }
  void check_layer(const Coupling& c) const {
    require(c.n == n_ && c.c >= 1 && c.c < n_, "FlowStack: coupling split out of range");
    require(c.net.in_dim() == c.c && c.net.out_dim() == 2 * (n_ - c.c), "FlowStack: coupling net shape mismatch");
  }

  double layer_forward(const LuMixing& l, std::vector<double>& v) const {
    const std::size_t n = n_;
    std::vector<double> u(n, 0.0), w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = l.diag(i) * v[i];
      for (std::size_t j = i + 1; j < n; ++j) acc += l.upper[i * n + j] * v[j];
      u[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double acc = u[i];
      for (std::size_t j = 0; j < i; ++j) acc += l.lower[i * n + j] * u[j];
      w[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = w[l.perm[i]] + l.bias[i];
    return l.logdet();
  }

  double layer_forward(const Permutation& p, std::vector<double>& v) const {
    std::vector<double> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = v[p.perm[i]];
    v.swap(out);
    return 0.0;
  }

  double layer_forward(const Coupling& cp, std::vector<double>& v) const {
    const std::size_t h = n_ - cp.c;
    const std::vector<double> st = cp.net(std::span<const double>(v.data(), cp.c));
    double ld = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double s = cp.bound * std::tanh(st[j]);
      v[cp.c + j] = v[cp.c + j] * std::exp(s) + st[h + j];
      ld += s;
    }
    return ld;
  }

  double layer_inverse(const LuMixing& l, std::vector<double>& x, FlowTape::Entry* e) const {
    const std::size_t n = n_;
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[l.perm[i]] = x[i] - l.bias[i];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) w[i] -= l.lower[i * n + j] * w[j];
    if (e) e->aux = w;  // u = L^{-1} P^T (x - b)
    for (std::size_t i = n; i-- > 0;) {
      double acc = w[i];
      for (std::size_t j = i + 1; j < n; ++j) acc -= l.upper[i * n + j] * w[j];
      w[i] = acc / l.diag(i);
    }
    x.swap(w);
    return -l.logdet();
  }

  double layer_inverse(const Permutation& p, std::vector<double>& y, FlowTape::Entry*) const {
    std::vector<double> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[p.perm[i]] = y[i];
    y.swap(out);
    return 0.0;
  }

  double layer_inverse(const Coupling& cp, std::vector<double>& y, FlowTape::Entry* e) const {
    const std::size_t h = n_ - cp.c;
    std::vector<double> st;
    if (e)
      st = cp.net.forward(std::span<const double>(y.data(), cp.c), e->net);
    else
      st = cp.net(std::span<const double>(y.data(), cp.c));
    double ld = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double s = cp.bound * std::tanh(st[j]);
      y[cp.c + j] = (y[cp.c + j] - st[h + j]) * std::exp(-s);
      ld -= s;
    }
    if (e) e->aux.assign(st.begin(), st.begin() + static_cast<std::ptrdiff_t>(h));
    return ld;
  }

  std::vector<double> lu_backward(const LuMixing& l, const FlowTape::Entry& e, const std::vector<double>& gv,
                                  double gld, LuMixing* gl) const {
    const std::size_t n = n_;
    const std::vector<double>& u = e.aux;
    const std::vector<double>& v = e.output;
    // v = U^{-1} u: du = U^{-T} gv
    std::vector<double> du(n);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = gv[i];
      for (std::size_t j = 0; j < i; ++j) acc -= l.upper[j * n + i] * du[j];
      du[i] = acc / l.diag(i);
    }
    // u = L^{-1} w: dw = L^{-T} du
    std::vector<double> dw(n);
    for (std::size_t i = n; i-- > 0;) {
      double acc = du[i];
      for (std::size_t j = i + 1; j < n; ++j) acc -= l.lower[j * n + i] * dw[j];
      dw[i] = acc;
    }
    if (gl) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) gl->upper[i * n + j] -= du[i] * v[j];
        gl->log_diag[i] += -du[i] * v[i] * l.diag(i) - gld;
        for (std::size_t j = 0; j < i; ++j) gl->lower[i * n + j] -= dw[i] * u[j];
      }
    }
    // w = P^T (x - b)
    std::vector<double> dx(n);
    for (std::size_t i = 0; i < n; ++i) dx[i] = dw[l.perm[i]];
    if (gl)
      for (std::size_t i = 0; i < n; ++i) gl->bias[i] -= dx[i];
    return dx;
  }

  std::vector<double> coupling_backward(const Coupling& cp, const FlowTape::Entry& e, const std::vector<double>& g,
                                        double gld, Coupling* gc) const {
    const std::size_t h = n_ - cp.c;
    const std::vector<double>& raw = e.aux;
    require(raw.size() == h, "FlowStack::backward: stale coupling tape");
    std::vector<double> dst(2 * h);
    std::vector<double> dy(g.begin(), g.end());
    double dbound = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double th = std::tanh(raw[j]);
      const double s = cp.bound * th;
      const double g2 = g[cp.c + j];
      const double x2 = e.output[cp.c + j];
      dy[cp.c + j] = g2 * std::exp(-s);
      dst[h + j] = -g2 * std::exp(-s);
      const double ds = -g2 * x2 - gld;
      dst[j] = ds * cp.bound * (1.0 - th * th);
      dbound += ds * th;
    }
    const std::vector<double> d1 = cp.net.backward(e.net, dst, gc ? &gc->net : nullptr);
    for (std::size_t j = 0; j < cp.c; ++j) dy[j] += d1[j];
    if (gc) gc->bound += dbound;
    return dy;
  }

  std::size_t n_ = 0;
  std::size_t m_ = 0;
  std::vector<FlowLayer> layers_;
};

/// x = f(concat(z, eps)).
inline std::vector<double> flow_forward(const FlowStack& f, std::span<const double> z, std::span<const double> eps,
                                        double* logdet = nullptr) {
  require(z.size() == f.latent_dim() && eps.size() == f.noise_dim(), "flow_forward: split sizes do not match n");
  std::vector<double> v(z.begin(), z.end());
  v.insert(v.end(), eps.begin(), eps.end());
  return f.forward(v, logdet);
}

struct FlowInverse {
  std::vector<double> z;
  std::vector<double> eps;
  double logdet_inv = 0.0;
};

inline FlowInverse flow_inverse(const FlowStack& f, std::span<const double> x) {
  require(all_finite(x), "flow_inverse: non-finite input");
  FlowInverse r;
  const std::vector<double> v = f.inverse(x, &r.logdet_inv);
  r.z.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(f.latent_dim()));
  r.eps.assign(v.begin() + static_cast<std::ptrdiff_t>(f.latent_dim()), v.end());
  return r;
}

/// Visit every trainable tensor as (name, span of values).
template <class Stack, class F>
void for_each_flow_param(Stack& f, const std::string& prefix, F&& fn) {
  auto& layers = f.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i);
    if (auto* lu = std::get_if<LuMixing>(&layers[i])) {
      fn(base + ".lower", std::span(lu->lower));
      fn(base + ".upper", std::span(lu->upper));
      fn(base + ".log_diag", std::span(lu->log_diag));
      fn(base + ".bias", std::span(lu->bias));
    } else if (auto* cp = std::get_if<Coupling>(&layers[i])) {
      auto& nl = cp->net.layers();
      for (std::size_t l = 0; l < nl.size(); ++l) {
        fn(base + ".net" + std::to_string(l) + ".weight", std::span(nl[l].weight));
        fn(base + ".net" + std::to_string(l) + ".bias", std::span(nl[l].bias));
      }
      fn(base + ".bound", std::span(&cp->bound, 1));
    }
  }
}

/// Random orthogonal n x n matrix (QR of a Gaussian matrix, sign-fixed).
inline Eigen::MatrixXd random_orthogonal(std::size_t n, Rng& rng) {
  Eigen::MatrixXd g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

struct FlowArchitecture {
  std::size_t depth = 6;
  std::vector<std::size_t> coupling_hidden{32};
  Activation coupling_activation = Activation::Gelu;
  MixingKind mixing = MixingKind::Lu;
  bool random_mixing = true;  // random orthogonal LU layers; otherwise identity
};

/// Alternating coupling / mixing stack, coupling first (latent side) and
/// mixing last (data side). Couplings start as the identity (zero output
/// layer); with n = 1 only mixing layers are used.
inline FlowStack make_flow(std::size_t n, std::size_t m, const FlowArchitecture& arch, Rng& rng) {
  FlowStack f(n, m);
  const std::size_t c = (n + 1) / 2;
  for (std::size_t i = 0; i < arch.depth; ++i) {
    if (i % 2 == 0) {
      if (n < 2) continue;
      std::vector<std::size_t> widths{c};
      widths.insert(widths.end(), arch.coupling_hidden.begin(), arch.coupling_hidden.end());
      widths.push_back(2 * (n - c));
      Coupling cp{n, c, Mlp(widths, arch.coupling_activation), 1.0};
      cp.net.init_uniform(rng);
      auto& last = cp.net.layers().back();
      std::fill(last.weight.begin(), last.weight.end(), 0.0);
      std::fill(last.bias.begin(), last.bias.end(), 0.0);
      f.add(std::move(cp));
    } else if (arch.mixing == MixingKind::Lu) {
      if (arch.random_mixing) {
        const std::vector<double> zero(n, 0.0);
        f.add(LuMixing::from_matrix(random_orthogonal(n, rng), zero));
      } else {
        f.add(LuMixing::identity(n));
      }
    } else {
      Permutation p;
      p.perm.resize(n);
      for (std::size_t j = 0; j < n; ++j) p.perm[j] = n - 1 - j;
      f.add(std::move(p));
    }
  }
  return f;
}

}  // namespace rsds

#endif  // RSDS_FLOW_HPP
