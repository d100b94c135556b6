#pragma once

// Deterministic RNG: xoshiro256++ seeded through SplitMix64, with hand-rolled
// uniform/normal/shuffle so draw sequences are identical across platforms and
// stdlib versions (std::<random> distributions are not bit-portable).

#include <cmath>
#include <cstdint>
#include <vector>

#include "arseg/common.hpp"

namespace arseg::core {

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed) {
    // SplitMix64 expansion of the 64-bit seed into the 256-bit state.
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9E3779B97F4A7C15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      s = z ^ (z >> 31);
    }
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    // xoshiro256++
    auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t uniform_int(uint64_t n) {
    ARSG_CHECK_CONTRACT(n > 0, "uniform_int: n must be positive");
    uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
    spare_ = mag * std::sin(two_pi_u2);
    has_spare_ = true;
    return mag * std::cos(two_pi_u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates.
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derived, statistically independent stream (e.g. one per epoch or image).
  Rng fork(uint64_t tag) const {
    uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ull * (tag + 0x632BE59BD9B4E019ull));
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return Rng(x ^ (x >> 31));
  }

 private:
  uint64_t seed_;
  uint64_t state_[4];
  bool has_spare_;
  double spare_;
};

}  // namespace arseg::core
