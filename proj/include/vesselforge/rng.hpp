#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vesselforge/common.hpp"

namespace vesselforge {

// PCG32 (O'Neill, pcg-random.org). Chosen over std engines because its two
// 64-bit words of state serialize into checkpoints directly and the output
// sequence is identical on every platform.
class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                 std::uint64_t stream = 0xda3e39cb94b95bdbULL) {
    state_ = 0u;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const std::uint32_t xorshifted =
        static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  /// Uniform in [0, 1) with 32-bit resolution.
  double next_double() { return next_u32() * 0x1p-32; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Unbiased uniform integer in [0, bound).
  std::uint32_t below(std::uint32_t bound) {
    if (bound == 0) throw ValueError("Pcg32::below: bound must be positive");
    const std::uint32_t threshold = (-bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  /// Standard normal via Box-Muller (cosine branch; two draws per call, no
  /// cached spare, so the consumed stream length is always 2).
  double normal() {
    const double u1 = (next_u32() + 0.5) * 0x1p-32;
    const double u2 = next_u32() * 0x1p-32;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t state() const { return state_; }
  std::uint64_t inc() const { return inc_; }

  static Pcg32 from_state(std::uint64_t state, std::uint64_t inc) {
    Pcg32 g;
    g.state_ = state;
    g.inc_ = inc;
    return g;
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
};

/// splitmix64 finalizer; derives independent substream seeds from one master.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Fisher-Yates permutation of {0..n-1}.
inline std::vector<std::size_t> random_permutation(std::size_t n, Pcg32& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(static_cast<std::uint32_t>(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace vesselforge
