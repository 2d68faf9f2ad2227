#ifndef RSDS_RNG_HPP
#define RSDS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include "rsds/error.hpp"

namespace rsds {

/// SplitMix64 finaliser; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of stream `stream` under master seed `seed`.
/// Streams are numbered per sequence, so sequence i of a dataset always
/// draws from stream_seed(seed, i) regardless of generation order.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

/// Portable random source: std::mt19937_64 (output fully specified by the
/// C++ standard) plus hand-written conversions, because the standard
/// distributions are implementation-defined.
class Rng {
 public:
  Rng() : engine_(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via the Marsaglia polar method; the second variate of
  /// each accepted pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * scale;
    has_spare_ = true;
    return u * scale;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::size_t index(std::size_t n) {
    require(n > 0, "Rng::index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = 0;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Draw from an unnormalised non-negative weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    require(total > 0.0, "Rng::categorical: weights sum to zero");
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return i;
    return weights.size() - 1;
  }

  template <class Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) std::swap(c[i - 1], c[index(i)]);
  }

  /// Text form of the full state (engine + cached normal).
  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << std::hexfloat << spare_;
    return os.str();
  }

  void deserialize(const std::string& text) {
    std::istringstream is(text);
    int flag = 0;
    std::string spare_text;
    is >> engine_ >> flag >> spare_text;
    if (!is) throw ParseError("Rng::deserialize: malformed RNG state");
    has_spare_ = flag != 0;
    spare_ = std::strtod(spare_text.c_str(), nullptr);
  }

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.engine_ == b.engine_ && a.has_spare_ == b.has_spare_ &&
           (!a.has_spare_ || a.spare_ == b.spare_);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rsds

#endif  // RSDS_RNG_HPP
