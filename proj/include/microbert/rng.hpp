#pragma once

#include <cstdint>
#include <cmath>

namespace microbert {

// Deterministic PRNG used everywhere randomness is needed. Distributions are
// implemented by hand so that a fixed seed reproduces the same stream on any
// platform, not just within one standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {
    // warm up so that nearby seeds diverge
    next_u64();
    next_u64();
  }

  // splitmix64
  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, n)
  uint64_t next_below(uint64_t n) {
    // rejection sampling to avoid modulo bias
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool next_bernoulli(double p) { return next_double() < p; }

  // standard normal via Box-Muller
  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 1e-300);
    u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  template <class It>
  void shuffle(It begin, It end) {
    auto n = static_cast<uint64_t>(end - begin);
    for (uint64_t i = n; i > 1; --i) {
      uint64_t j = next_below(i);
      std::swap(begin[i - 1], begin[j]);
    }
  }

  // derive an independent stream from this seed and a set of indices
  static uint64_t mix(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
    Rng r(a);
    r.state_ ^= 0x2545f4914f6cdd1dULL * (b + 1);
    r.next_u64();
    r.state_ ^= 0x9e3779b97f4a7c15ULL * (c + 1);
    r.next_u64();
    r.state_ ^= 0xd6e8feb86659fd93ULL * (d + 1);
    return r.next_u64();
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace microbert
