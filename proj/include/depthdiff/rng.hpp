#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "depthdiff/hash.hpp"

namespace depthdiff {

/// Counter-based generator. A stream is a (key, counter) pair; value i of a
/// stream is a pure function of key and i, so draws never depend on how many
/// values other streams consumed. Child streams are derived by label or index.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6d657472696367ULL)) {}

  Rng stream(std::string_view label) const { return Rng(key_, mix64(key_ ^ fnv1a(label))); }
  Rng stream(std::uint64_t index) const {
    return Rng(key_, mix64(key_ + mix64(index ^ 0xa5a5a5a5a5a5a5a5ULL)));
  }

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++ + 0x243f6a8885a308d3ULL)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses the high bits via a 128-bit multiply.
  std::int64_t uniform_int(std::int64_t n) {
    const auto wide = static_cast<unsigned __int128>(next_u64()) * static_cast<std::uint64_t>(n);
    return static_cast<std::int64_t>(wide >> 64);
  }

  bool coin() { return (next_u64() >> 63) != 0; }

  /// Standard normal via Box-Muller; consumes two counter values per draw.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t /*parent*/, std::uint64_t key) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace depthdiff
