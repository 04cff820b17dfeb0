#ifndef RPFEM_RANDOM_HPP_
#define RPFEM_RANDOM_HPP_

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

#include "rpfem/tensor.hpp"

namespace rpfem {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seeded 64-bit generator. Streams are split by label, so components can be
/// reseeded independently: Rng(7).split("weights") never depends on how many
/// draws Rng(7).split("scenes") made.
///
/// Distributions are implemented here rather than via <random>'s
/// distribution classes, whose output is implementation-defined.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  Rng split(std::string_view label) const {
    return Rng(splitmix64(seed_ ^ fnv1a64(label)));
  }
  Rng split(std::uint64_t index) const {
    return Rng(splitmix64(seed_ + 0x632be59bd9b4e019ULL * (index + 1)));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline NDArray random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  NDArray out(std::move(shape));
  for (double& v : out.data) v = stddev * rng.normal();
  return out;
}

inline NDArray random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  NDArray out(std::move(shape));
  for (double& v : out.data) v = rng.uniform(lo, hi);
  return out;
}

/// Xavier/Glorot uniform weights for a [fan_in x fan_out] matrix.
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor(random_uniform(Shape{fan_in, fan_out}, rng, -limit, limit), true);
}

}  // namespace rpfem

#endif  // RPFEM_RANDOM_HPP_
