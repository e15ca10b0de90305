// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace sgmm {

// SplitMix64: a 64-bit counter-based generator (Steele, Lea, Flood 2014).
// The whole state is one u64, output is a fixed bijective mix of the
// counter, so streams are reproducible on every platform and language.
class SplitMix64 {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % n;
  }

  // Standard normal via Box-Muller; no cached spare so the state stays one
  // word.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Independent stream seed for (seed, a, b); used to give every training
  // step / video its own generator without carrying state around.
  static constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a,
                                        std::uint64_t b = 0) {
    std::uint64_t h = mix(seed + kGolden);
    h = mix(h ^ (a + 0x632BE59BD9B4E019ULL));
    h = mix(h ^ (b + 0x8CB92BA72F3D8DD7ULL));
    return h;
  }

 private:
  std::uint64_t state_;
};

}  // namespace sgmm
