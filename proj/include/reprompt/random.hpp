#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace reprompt {

using Rng = std::mt19937_64;

/// Deterministic child seed: root seed mixed with structured offsets through
/// splitmix64, so (root, 3, 7) and (root, 7, 3) give unrelated streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(root);
  for (std::uint64_t p : path) h = mix(h ^ mix(p + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform integer in [0, n) drawn with a fixed, library-independent recipe
/// (Lemire-style rejection on 64-bit words).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace reprompt
