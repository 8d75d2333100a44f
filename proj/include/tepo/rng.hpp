#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tepo {

/// SplitMix64 finalizer. Used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

/// Combines an ordered list of integers into one seed, e.g.
/// derive_seed({global_seed, prompt_id, response_index}).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Per-caller random stream. Never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
};

}  // namespace tepo
