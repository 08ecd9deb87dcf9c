#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fblab/core/error.hpp"

namespace fblab::core {

/// The repo-wide random generator: SplitMix64, a seedable 64-bit engine with a
/// one-word state. Every stochastic component derives its own stream from a
/// master seed and a fixed stream tag, so runs are reproducible bit-for-bit.
///
/// Distribution recipes are fixed here once so that identical seeds yield
/// identical draws everywhere:
///   - uniforms from the top 53 bits,
///   - Gaussians by Box-Muller (the spare is cached),
///   - Cauchy by inverse CDF: scale * tan(pi * (u - 1/2)),
///   - Gamma by Marsaglia-Tsang squeeze (with the alpha < 1 boost),
///   - Dirichlet by normalized Gamma draws.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  /// SplitMix64 finalizer; also used to derive stream seeds.
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Child seed for a named sub-stream of `master`.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t tag) {
    return mix(master ^ mix(tag * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1]; safe as a log/exponent argument.
  double uniform_pos() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; generates pairs and caches the spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Cauchy(0, scale) via the inverse CDF.
  double cauchy(double scale) { return scale * std::tan(M_PI * (uniform() - 0.5)); }

  /// Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 handled by the boost
  /// gamma(alpha) = gamma(alpha + 1) * u^(1/alpha).
  double gamma_sample(double alpha) {
    if (!(alpha > 0.0)) throw NumericError("gamma_sample: alpha must be positive");
    if (alpha < 1.0) {
      const double boost = std::pow(uniform_pos(), 1.0 / alpha);
      return gamma_sample(alpha + 1.0) * boost;
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Symmetric Dirichlet(concentration) over `n` categories.
  std::vector<double> dirichlet(double concentration, int n) {
    std::vector<double> out(static_cast<std::size_t>(n));
    double sum = 0.0;
    for (auto& x : out) {
      x = gamma_sample(concentration);
      sum += x;
    }
    if (!(sum > 0.0)) throw NumericError("dirichlet: degenerate draw");
    for (auto& x : out) x /= sum;
    return out;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Free-function form of stream derivation for call-site brevity.
inline std::uint64_t derive(std::uint64_t master, std::uint64_t tag) {
  return SplitMix64::derive(master, tag);
}

/// Named sub-stream tags (documented in the README). Derivation:
/// seed_stream = derive(master_seed, tag).
namespace stream {
inline constexpr std::uint64_t kModelInit = 1;
inline constexpr std::uint64_t kTrainLatents = 2;
inline constexpr std::uint64_t kEvalLatents = 3;
inline constexpr std::uint64_t kEquivParams = 4;
inline constexpr std::uint64_t kDataset = 5;
}  // namespace stream

}  // namespace fblab::core
