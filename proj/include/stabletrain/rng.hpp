#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace stabletrain {

// Deterministic, splittable pseudo-random stream built on SplitMix64.
// Identical seed + identical draw sequence gives identical values on every
// platform, which the reproducibility tests rely on. Splitting derives an
// independent stream per sample so batch-parallel distortion application
// stays deterministic regardless of evaluation order.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(mix(seed ^ kGolden)) {}

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [lo, hi] inclusive.
  long uniform_int(long lo, long hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<long>(next_u64() % span);
  }

  // Standard normal via Box-Muller; one value per call, no caching so the
  // draw count stays predictable.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Derives an independent child stream; split(i) != split(j) for i != j and
  // drawing from a child does not advance the parent.
  RngStream split(std::uint64_t index) const {
    return RngStream(mix(state_ ^ mix(index + 0x9e3779b97f4a7c15ULL)));
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace stabletrain
