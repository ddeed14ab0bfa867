#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tinyft::rng {

// splitmix64, used to derive independent stream seeds from (seed, tag, index)
// so that draw order never depends on batch composition or thread schedule.
inline uint64_t mix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag, uint64_t index = 0) {
  return mix(mix(mix(seed) ^ tag) ^ index);
}

// Deterministic generator. Distribution conversions are spelled out by hand
// instead of using std::uniform_real_distribution and friends, whose exact
// output is implementation defined; this keeps traces stable across
// standard library versions.
class Stream {
 public:
  explicit Stream(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  uint64_t uniform_index(uint64_t n) {
    return n == 0 ? 0 : gen_() % n;
  }

  // Standard normal via Box-Muller. Consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 gen_;
};

// Fisher-Yates shuffle driven by a Stream, again pinned by hand so shuffles
// are reproducible byte for byte.
template <typename T>
void shuffle(std::vector<T>& v, Stream& s) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(s.uniform_index(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace tinyft::rng
