#pragma once

#include <cstdint>
#include <random>

namespace cct {

// Seedable random stream. Every source of randomness in the library
// (init, noise, dropout, data generation, budget assignment) draws from
// an explicit Rng so runs are reproducible from a single seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return std::uniform_int_distribution<int>(0, n - 1)(gen_);
  }

  std::uint64_t next_u64() { return gen_(); }

  // Derives an independent child stream; mixing keeps nearby
  // (seed, stream) pairs uncorrelated.
  Rng split(std::uint64_t stream) {
    return Rng(mix(gen_() ^ mix(stream)));
  }

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace cct
