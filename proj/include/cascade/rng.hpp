#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace cascade {

// Reproducibility helpers. std::mt19937_64 is bit-exact across platforms but the
// standard distributions are not, so all draws go through the helpers below.
namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace rng

class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : seed_(seed), engine_(rng::splitmix64(seed)) {}

  // Independent stream derived from (seed, stream); repeat i of a batch job uses
  // split(i) so results do not depend on evaluation order.
  SplitRng split(std::uint64_t stream) const {
    return SplitRng(rng::splitmix64(seed_ ^ (0xA24BAED4963EE407ULL * (stream + 1))));
  }

  std::uint64_t bits() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound), bias-free.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % bound;
  }

  // Standard normal via Box-Muller.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[below(i)]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace cascade
