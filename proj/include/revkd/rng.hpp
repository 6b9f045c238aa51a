#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace revkd {

/// Seeded generator. Substreams are derived by hashing a name or an index into
/// the seed, so a run is reproducible from one integer regardless of how work
/// is partitioned across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng substream(std::string_view name) const;
  Rng substream(std::uint64_t index) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  /// Index drawn from an unnormalized nonnegative weight vector.
  std::size_t categorical(std::span<const double> weights);

  static std::uint64_t mix(std::uint64_t x);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace revkd
