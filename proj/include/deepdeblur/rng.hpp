#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "deepdeblur/errors.hpp"

namespace deepdeblur {

/// splitmix64 step; used to mix (seed, stream) pairs into engine seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic random source.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard)
/// and maps raw 64-bit draws to doubles and ranges with explicit arithmetic,
/// so results are bit-identical across platforms and library versions.
/// std::uniform_real_distribution and friends are deliberately avoided:
/// their mappings are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream derived from a base seed and a stream id.
  /// Distinct (seed, stream) pairs give unrelated sequences.
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    return Rng(splitmix64(splitmix64(seed) ^ splitmix64(~stream_id)));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }

  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // log(0) guard
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) {
    return mean + stddev * normal();
  }

  /// Uniform integer in [0, n) by rejection, so every value is equally
  /// likely regardless of n.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw DimensionError("uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stream id layout used across the library: a one-byte tag in the top
/// byte, a step counter in the middle, and an item index in the low bits.
/// Keeps every (tag, step, item) triple on its own stream.
inline constexpr std::uint64_t stream_id(std::uint8_t tag,
                                         std::uint64_t step,
                                         std::uint64_t item) {
  return (static_cast<std::uint64_t>(tag) << 56) | ((step & 0xffffffffffULL) << 16) |
         (item & 0xffffULL);
}

namespace stream_tag {
inline constexpr std::uint8_t kKernel = 1;    // blur kernel synthesis
inline constexpr std::uint8_t kInit = 2;      // network weight init
inline constexpr std::uint8_t kNoise = 3;     // degradation noise
inline constexpr std::uint8_t kSampling = 4;  // batch / pair sampling
}  // namespace stream_tag

}  // namespace deepdeblur
