#pragma once

#include <array>
#include <cstdint>

namespace atomicl {

/// Counter-based Philox4x32-10 generator.
///
/// Every output is a pure function of (seed, stream, counter), so a Monte
/// Carlo trial can own `rng.split(trial_index)` and produce the same numbers
/// regardless of which thread runs it or in which order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  /// Number of 128-bit blocks consumed so far.
  std::uint64_t position() const noexcept { return counter_; }

  /// Independent child generator. Does not advance this generator.
  Rng split(std::uint64_t id) const noexcept;

  std::uint32_t next_u32() noexcept;
  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) noexcept;
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept;

  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr,
                                             std::array<std::uint32_t, 2> key) noexcept;

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace atomicl
