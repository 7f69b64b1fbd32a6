#pragma once

#include <cmath>
#include <cstdint>

namespace pcan {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random source (xoshiro256++). All randomness in the project
// flows through this class so that results do not depend on the standard
// library's distribution implementations. child(tag) derives an independent
// stream from the original seed, so per-scene streams are stable no matter
// how much the parent has been consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  Rng child(uint64_t tag) const {
    uint64_t sm = seed_ ^ (0x5851f42d4c957f2dULL * (tag + 1));
    return Rng(splitmix64(sm));
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  double normal(double mean = 0.0, double sd = 1.0) {
    // Box-Muller; one draw per call keeps the stream position predictable.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    return mean + sd * z;
  }

  double truncated_normal(double mean, double sd, double lo, double hi) {
    if (sd == 0.0) return mean < lo ? lo : (mean > hi ? hi : mean);
    for (int i = 0; i < 100; ++i) {
      const double x = normal(mean, sd);
      if (x >= lo && x <= hi) return x;
    }
    const double x = normal(mean, sd);
    return x < lo ? lo : (x > hi ? hi : x);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t seed_;
  uint64_t s_[4];
};

}  // namespace pcan
