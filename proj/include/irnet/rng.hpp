#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace irnet {

// Counter-free splitmix64 stream. Used everywhere randomness is needed so
// results do not depend on platform library implementations.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
    return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Normal truncated to [-cutoff_sigmas, +cutoff_sigmas] standard deviations,
  // scaled by sigma. Rejection sampling; acceptance ~95% at 2 sigma.
  double truncated_normal(double sigma, double cutoff_sigmas) {
    for (;;) {
      double z = normal();
      if (std::abs(z) <= cutoff_sigmas) return z * sigma;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates; std::shuffle's draw sequence is not pinned by the standard.
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  uint64_t state_;
};

inline uint64_t hash_string(const std::string& s) {
  // FNV-1a 64-bit.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stream keyed by (seed, name): parameter initialization draws from here so
// the result depends only on the parameter's name, never on build order.
inline Rng named_rng(uint64_t seed, const std::string& name) {
  return Rng(mix_seed(seed, hash_string(name)));
}

}  // namespace irnet
