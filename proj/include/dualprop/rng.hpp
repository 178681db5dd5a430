#pragma once

#include <cstdint>
#include <random>

namespace dualprop {

// Deterministic random source. Only the raw mt19937_64 stream is used, so the
// same seed produces the same draws on every platform; the distribution
// helpers below avoid std::uniform_real_distribution on purpose (its output
// is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (two uniforms per draw, no cached spare)
  double normal();

  // index in [0, n)
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dualprop
