#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace diffsr {

/// SplitMix64 finalizer (Steele, Lea & Flood constants).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// Derives an independent stream key from a parent key and a tag.
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t tag) noexcept {
  return mix64(key ^ mix64(tag + kGoldenGamma));
}

/// Counter-based 64-bit generator: draw i of stream `key` is mix64(key + (i + 1) * golden gamma).
///
/// Every draw is a pure function of (key, counter), so results are identical across
/// platforms and independent of how work is split. Normals use Box-Muller on two
/// uniforms, never the implementation-defined std:: distributions.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept : key_(key), counter_(counter) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return mix64(key_ + (++counter_) * kGoldenGamma); }

  /// Uniform on the open interval (0, 1) with 53-bit resolution.
  double uniform() noexcept { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(static_cast<double>(span) * uniform());
  }

  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace diffsr
