#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace sharedrep {

/// Named random streams. Every component draws from its own stream so that
/// it can be reproduced in isolation from (seed, stream, index).
enum class Stream : std::uint64_t {
  world = 1,
  data = 2,
  optimizer = 3,
  xi_sampling = 4,
  instance = 5,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Mixes any number of 64-bit words into one key.
inline constexpr std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

/// Counter-based 64-bit generator: output i is a bijective mix of
/// (key, i), so any position of any stream can be recomputed directly.
/// Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, Stream stream = Stream::instance,
                      std::uint64_t index = 0) noexcept
      : key_(mix_key(mix_key(seed, static_cast<std::uint64_t>(stream)), index)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept {
    return splitmix64(key_ ^ splitmix64(counter_++));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in (0, 1).
  double uniform_open() noexcept {
    double u = 0.0;
    while (u == 0.0) u = uniform();
    return u;
  }

  double normal() {
    std::normal_distribution<double> dist;
    return dist(*this);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(*this);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Uniform point on the (k-1)-simplex by sorted uniform spacings.
inline Eigen::VectorXd uniform_simplex(CounterRng& rng, Eigen::Index k) {
  std::vector<double> cuts;
  cuts.reserve(static_cast<std::size_t>(k) + 1);
  cuts.push_back(0.0);
  for (Eigen::Index i = 0; i + 1 < k; ++i) cuts.push_back(rng.uniform());
  cuts.push_back(1.0);
  std::sort(cuts.begin() + 1, cuts.end() - 1);
  Eigen::VectorXd w(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    w(i) = cuts[static_cast<std::size_t>(i) + 1] - cuts[static_cast<std::size_t>(i)];
  }
  // Spacings sum to 1 up to rounding; renormalize so the simplex check is exact.
  w /= w.sum();
  return w;
}

}  // namespace sharedrep
