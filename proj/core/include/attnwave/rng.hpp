#pragma once

#include <cstdint>

namespace attnwave {

// splitmix64 step (Vigna). Used for seeding and for deriving child streams.
uint64_t splitmix64(uint64_t& state);

// Deterministic random generator: xoshiro256** (Blackman & Vigna 2018),
// seeded by expanding the 64-bit seed through splitmix64. The algorithm is
// fixed so that an identical seed yields an identical stream on every
// platform; no <random> distributions are used anywhere (their output is
// implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n), n > 0. Bitmask rejection, no modulo bias.
  uint64_t below(uint64_t n);

  // Standard normal via Box-Muller with a cached spare.
  double normal();
  double normal(double mean, double stddev);

  // Independent child stream, deterministic in (seed, id).
  Rng fork(uint64_t id) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_ = 0;
  uint64_t state_[4] = {0, 0, 0, 0};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stateless mix of a base seed and a stream index; handy for per-instance
// and per-step seeds that must not correlate.
uint64_t mix_seed(uint64_t base, uint64_t stream);

}  // namespace attnwave
