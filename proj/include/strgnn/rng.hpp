#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace strgnn {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed. splitmix64 finalizer,
// so nearby (seed, stream) pairs land far apart.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Index draw via 128-bit multiply (Lemire). Avoids std::uniform_int_distribution
// so sampled sequences do not depend on the standard library implementation.
inline std::size_t rng_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(
      (static_cast<unsigned __int128>(rng()) * n) >> 64);
}

// Uniform double in [0, 1) with 53 random bits.
inline double rng_unit(Rng& rng) { return (rng() >> 11) * 0x1.0p-53; }

inline double rng_uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * rng_unit(rng);
}

inline bool rng_coin(Rng& rng) { return (rng() & 1) != 0; }

// Fisher-Yates with rng_index, for the same portability reason as above.
template <typename T>
void rng_shuffle(Rng& rng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng_index(rng, i)]);
  }
}

}  // namespace strgnn
