#pragma once

// Deterministic random helpers. mt19937_64 is fully specified by the
// standard; the distributions here are hand-derived from raw 64-bit draws
// because std::uniform_real_distribution and friends are implementation
// defined and would break bit-reproducibility across toolchains.

#include <cstdint>
#include <random>

namespace bsm::rng {

inline double uniform01(std::mt19937_64& g) {
  return double(g() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

inline int64_t uniform_int(std::mt19937_64& g, int64_t lo, int64_t hi_excl) {
  // Modulo bias is irrelevant at the ranges used here (offsets, indices).
  return lo + static_cast<int64_t>(g() % uint64_t(hi_excl - lo));
}

inline double gaussian(std::mt19937_64& g) {
  // Box-Muller; discards the second variate for simplicity.
  double u1 = uniform01(g);
  while (u1 <= 0.0) u1 = uniform01(g);
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Stream splitting: derives an independent seed from (base, a, b) so draws
// can be assigned per step/micro-batch index and replayed from a checkpoint.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  // splitmix64 finalizer over the mixed words
  uint64_t x = base ^ (a * 0x9E3779B97F4A7C15ull) ^
               (b * 0xBF58476D1CE4E5B9ull) ^ 0x94D049BB133111EBull;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

}  // namespace bsm::rng
