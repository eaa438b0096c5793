// SPDX-License-Identifier: Apache-2.0
#ifndef AGRIFUSE_RNG_HPP
#define AGRIFUSE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace agrifuse {

/// Deterministic random source. Every stochastic operation in the library
/// takes one of these explicitly; a fixed seed reproduces byte-identical
/// runs. The transforms below are hand-rolled on top of mt19937_64 because
/// the std::*_distribution classes are not guaranteed to produce the same
/// sequence across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. Two engine draws per call, no cached
  /// second value, so call order alone determines the stream.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return n == 0 ? 0 : engine_() % n;
  }

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 mix step; used to derive independent per-task seeds from a
/// base seed plus stream tags so parallel work stays deterministic.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace agrifuse

#endif  // AGRIFUSE_RNG_HPP
