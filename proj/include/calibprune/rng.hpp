// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "calibprune/error.hpp"

namespace calibprune {

inline constexpr uint64_t SplitMix64(uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based random stream: draw k is a pure function of
// (seed, stream_id, k), so streams are reproducible on any platform and can be
// handed to parallel workers without coordination.
class RngStream {
 public:
  RngStream() = default;
  RngStream(uint64_t seed, uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id), key_(SplitMix64(SplitMix64(seed) ^ stream_id)) {}

  uint64_t seed() const noexcept { return seed_; }
  uint64_t stream_id() const noexcept { return stream_id_; }
  uint64_t counter() const noexcept { return counter_; }

  uint64_t NextU64() noexcept {
    const uint64_t x = SplitMix64(key_ ^ SplitMix64(counter_));
    ++counter_;
    return x;
  }

  // Uniform in [0, 1) with 53 random bits.
  double NextDouble() noexcept {
    return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound); rejection sampling removes modulo bias.
  uint64_t UniformInt(uint64_t bound) {
    Require(bound > 0, ErrorCode::kInvalidArgument, "UniformInt bound must be > 0");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x = NextU64();
    while (x >= limit) x = NextU64();
    return x % bound;
  }

  // Standard normal via Box-Muller (one value per two uniforms).
  double Normal() noexcept {
    double u1 = NextDouble();
    const double u2 = NextDouble();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent child stream, e.g. one per experiment cell.
  RngStream Derive(uint64_t child) const noexcept {
    return RngStream(seed_, SplitMix64(stream_id_ * 0x9e3779b97f4a7c15ULL + child + 1));
  }

 private:
  uint64_t seed_ = 0;
  uint64_t stream_id_ = 0;
  uint64_t key_ = SplitMix64(SplitMix64(0));
  uint64_t counter_ = 0;
};

}  // namespace calibprune
