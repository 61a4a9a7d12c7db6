#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace aov {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic random source. Only the mt19937_64 engine from the standard
/// library is used (its output sequence is pinned by the standard); all
/// distributions are derived here by hand, so the same seed yields the same
/// stream on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : base_seed_(seed), engine_(seed) {}

  /// Independent stream derived from (base seed, stream id). Forking never
  /// advances or depends on this generator's state.
  Rng fork(std::uint64_t stream) const {
    std::uint64_t s = base_seed_ ^ (0xa0761d6478bd642full * (stream + 1));
    return Rng(splitmix64(s));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) {
    // Multiply-shift; bias is < 2^-64 per draw.
    unsigned __int128 m =
        static_cast<unsigned __int128>(engine_()) * static_cast<unsigned __int128>(n);
    return static_cast<std::size_t>(m >> 64);
  }

  template <typename It>
  void shuffle(It begin, It end) {
    const auto n = static_cast<std::size_t>(end - begin);
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = index(i);
      std::swap(begin[i - 1], begin[j]);
    }
  }

 private:
  std::uint64_t base_seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace aov
