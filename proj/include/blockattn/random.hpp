// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <blockattn/tensor.hpp>

namespace blockattn {

// SplitMix64: tiny, portable, deterministic across platforms and standard
// library versions. std::uniform_real_distribution is deliberately avoided
// because its output is implementation-defined and we want byte-stable
// fixtures from a recorded seed.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [-1, 1).
  double next_pm1() { return next_unit() * 2.0 - 1.0; }

  // Uniform integer in [0, n); n must be positive. Simple modulo; the tiny
  // bias is irrelevant for test-data generation.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

template <typename Real>
Tensor4<Real> random_tensor(std::uint64_t seed, i64 b, i64 h, i64 l, i64 d) {
  SplitMix64 rng(seed);
  std::vector<Real> data(static_cast<std::size_t>(b * h * l * d));
  for (auto& v : data) v = static_cast<Real>(rng.next_pm1());
  return Tensor4<Real>(b, h, l, d, std::move(data));
}

// Fisher-Yates shuffle driven by SplitMix64, again for portability.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace blockattn
