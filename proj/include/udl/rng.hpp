#pragma once

#include <cmath>
#include <cstdint>

namespace udl {

/// Counter-based pseudo-random generator (SplitMix64 finalizer over
/// seed + counter * golden gamma). The n-th output is a pure function of
/// (seed, n), so streams are reproducible byte-for-byte and can be split
/// deterministically for parallel generation.
///
/// Sub-stream rule: stream(i) reseeds with mix64(seed ^ mix64(GAMMA + i)).
/// Parallel generators must derive their seeds through stream() so that
/// worker count never changes the sampled values.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() { return mix64(seed_ + kGamma * ++counter_); }

  /// Uniform on [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes exactly two uniforms per pair.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // 1 - u in (0, 1] keeps the log argument away from zero.
    const double u1 = 1.0 - next_unit();
    const double u2 = next_unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  CounterRng stream(std::uint64_t index) const {
    return CounterRng(mix64(seed_ ^ mix64(kGamma + index)));
  }

  std::uint64_t seed() const { return seed_; }

  static std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace udl
