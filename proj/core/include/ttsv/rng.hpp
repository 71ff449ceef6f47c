#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace ttsv {

/// Deterministic PRNG (xoshiro256++) with explicit stream derivation.
///
/// All randomness in the project flows through this class so that runs are
/// byte-reproducible across machines. Substreams are derived by hashing
/// (seed, tag, index) so per-sample / per-epoch streams are independent of
/// batch composition.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  /// Derives an independent stream from (seed, tag, index).
  static Rng stream(uint64_t seed, std::string_view tag, uint64_t index = 0);

  /// Next raw 64-bit value.
  uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform();

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n);

  /// Standard normal via Box-Muller (cached spare).
  double normal();

  /// Normal with the given mean and standard deviation.
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Samples an index from a normalized probability vector (inverse CDF).
  size_t categorical(std::span<const double> probs);

 private:
  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 step; used for seeding and hash mixing.
uint64_t splitmix64(uint64_t& state);

/// Stable 64-bit hash of (seed, tag, index) used for stream derivation.
uint64_t hash_stream(uint64_t seed, std::string_view tag, uint64_t index);

}  // namespace ttsv
