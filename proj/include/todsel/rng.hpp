// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace todsel::ts {

// Counter-based PRNG: output i of a stream is mix64(seed + i*GAMMA), so a
// stream is fully determined by (seed, position) and streams derived from the
// same root seed never interact. Identical seed + identical call sequence
// gives a bit-identical sample sequence on every platform.
class Rng {
 public:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  Rng() : seed_(0), pos_(0) {}
  explicit Rng(uint64_t seed, uint64_t pos = 0) : seed_(seed), pos_(pos) {}

  uint64_t seed() const { return seed_; }
  uint64_t position() const { return pos_; }

  // Independent child stream; stream ids give disjoint generators.
  Rng stream(uint64_t stream_id) const {
    return Rng(mix64(seed_ + (stream_id + 1) * kGamma));
  }

  uint64_t next_u64() { return mix64(seed_ + (++pos_) * kGamma); }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (always consumes two draws).
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename It>
  void shuffle(It begin, It end) {
    const auto n = static_cast<uint64_t>(end - begin);
    for (uint64_t i = n; i > 1; --i) {
      const uint64_t j = uniform_int(i);
      std::swap(*(begin + static_cast<ptrdiff_t>(i - 1)), *(begin + static_cast<ptrdiff_t>(j)));
    }
  }

  static uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

 private:
  uint64_t seed_;
  uint64_t pos_;
};

// Stream ids used across the project so that, e.g., distractor sampling and
// Gumbel noise never share a generator.
enum class Stream : uint64_t {
  init = 1,
  data_order = 2,
  distractor = 3,
  gumbel = 4,
  dropout = 5,
  corpus = 6,
  fixture = 7,
};

inline Rng stream_rng(uint64_t root_seed, Stream s) {
  return Rng(root_seed).stream(static_cast<uint64_t>(s));
}

}  // namespace todsel::ts
