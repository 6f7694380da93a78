#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace s2fpn {

// Distribution helpers with a fixed algorithm, so seeded streams produce the
// same numbers with every standard library.

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double normal01(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Uniform integer in [0, bound).
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t bound) {
  return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(bound)) % bound;
}

/// Seed for an independent stream identified by (seed, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  // splitmix64 finalizer over the combined key
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

}  // namespace s2fpn
