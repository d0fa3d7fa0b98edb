#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace remi {

/// SplitMix64 finalizer over (seed, stream): independent generator seeds
/// addressable by counter, e.g. one per epoch.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Permutation of [0, n) fully determined by (seed, stream).
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, stream));
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace remi
