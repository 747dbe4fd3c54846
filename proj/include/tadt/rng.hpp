#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace tadt {

// Seeded generator owned by one training or inference context. Draws are
// derived from raw 64-bit engine output so sequences are reproducible
// independently of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (one engine pair per draw, no caching).
  double normal();
  // Normal with the given std, redrawn until |x| <= 2 std.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t next_u64() { return engine_(); }

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tadt
