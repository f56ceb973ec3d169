// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace lf {

// 64-bit FNV-1a. Used for seed derivation and for content digests in reports;
// both are reproducibility contracts, so the constants are fixed here and
// must not change.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), hash);
}

// Accumulates heterogeneous values into one 64-bit stream seed. Integers are
// fed as 8 little-endian bytes, strings as length + bytes, so distinct
// argument sequences cannot collide by concatenation.
class SeedMix {
 public:
  SeedMix& mix(std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    hash_ = fnv1a64(bytes, 8, hash_);
    return *this;
  }

  SeedMix& mix(std::string_view s) {
    mix(static_cast<std::uint64_t>(s.size()));
    hash_ = fnv1a64(s.data(), s.size(), hash_);
    return *this;
  }

  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// Multiplicative congruential generator, x <- x * 0xf1357aea2e62a9c5 mod 2^64
// with the state forced odd. This exact stream, together with the Fisher-Yates
// pass below, defines the seeded-split and corpus-generation contract: the
// same seed must produce the same ordering in any implementation.
class Mcg64 {
 public:
  explicit Mcg64(std::uint64_t seed) : state_(2 * seed + 1) {}

  std::uint64_t next() {
    state_ *= 0xf1357aea2e62a9c5ULL;
    return state_;
  }

  // Draw in [0, n) from the high bits (the low bits of an MCG are constant).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; one normal per call, no caching, so the draw count per
  // consumer is fixed and schedule independent.
  double normal() {
    double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(next() >> 11) * 0x1.0p-53;        // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

 private:
  std::uint64_t state_;
};

template <typename T>
void fisher_yates(std::vector<T>& v, Mcg64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

}  // namespace lf
