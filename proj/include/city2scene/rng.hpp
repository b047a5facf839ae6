#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace city2scene {

using Rng = std::mt19937_64;

/// Independent, reproducible generator for (seed, stream). Distinct streams
/// let weight init, data order and augmentation draws evolve separately.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x9e3779b9u};
  return Rng(seq);
}

enum RngStream : std::uint64_t {
  kStreamInit = 1,
  kStreamOrder = 2,
  kStreamAugment = 3,
  kStreamSplit = 4,
  kStreamSynth = 5,
};

/// Beta(a, b) via two gamma draws.
inline double sample_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y <= 0.0) return 0.5;
  return x / (x + y);
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

}  // namespace city2scene
