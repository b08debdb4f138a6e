#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace cade {

/// Seeded generator with platform-independent distributions (the standard
/// library's distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();

  /// Independent generator derived from this one's seed material and a tag.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cade
