#pragma once

#include <cmath>
#include <cstdint>

namespace opcal {

// Deterministic standard-normal stream (splitmix64 state, Box-Muller pairs).
// Self-contained so that identical seeds give identical draws on any platform,
// independent of the standard library's distribution internals.
class NormalSampler {
 public:
  explicit NormalSampler(uint64_t seed) : state_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1], u2 in [0,1)
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1p-53;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Derives an independent substream seed, e.g. per Monte-Carlo batch.
  static uint64_t substream(uint64_t seed, uint64_t index) {
    uint64_t s = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    return mix(s);
  }

 private:
  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace opcal
