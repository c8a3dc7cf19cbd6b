#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace akd {

/// SplitMix64 stream. Used instead of <random> distributions because the
/// noise draws must be reproducible bit-for-bit by out-of-process guidance
/// providers (the wire protocol only carries the seed).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in (0, 1]: top 53 bits, offset by one ulp so log() is finite.
  double uniform() { return (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::uint64_t state_;
};

/// Standard normal draws: Box-Muller on consecutive uniform pairs,
/// element 2k = r·cos(2πu₂), element 2k+1 = r·sin(2πu₂), r = sqrt(-2 ln u₁).
inline std::vector<double> gaussian_noise(std::uint64_t seed, std::size_t count) {
  SplitMix64 rng(seed);
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; i += 2) {
    double u1 = rng.uniform();
    double u2 = rng.uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double phi = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(phi);
    if (i + 1 < count) out[i + 1] = r * std::sin(phi);
  }
  return out;
}

/// Independent per-iteration seed derived from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::uint64_t stream = 0) {
  SplitMix64 a(base ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  std::uint64_t x = a.next() ^ (index * 0x9E3779B97F4A7C15ULL);
  return SplitMix64(x).next();
}

}  // namespace akd
