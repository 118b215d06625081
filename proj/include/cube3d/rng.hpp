// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "cube3d/matrix.hpp"

namespace cube3d {

/// Deterministic uniform sampling on top of mt19937_64. The bit-to-double
/// mapping is spelled out here because std::uniform_real_distribution is
/// implementation-defined and seeds must reproduce across toolchains.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Uniform integer in [0, bound) by rejection-free scaling; bound is
  /// tiny here so modulo bias is irrelevant, but keep it exact anyway.
  std::uint64_t below(std::uint64_t bound) { return gen_() % bound; }

private:
  std::mt19937_64 gen_;
};

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
  Matrix<T> m(rows, cols);
  for (auto& x : m.data) x = static_cast<T>(rng.uniform(lo, hi));
  return m;
}

/// Integer-valued entries in [0, bound); exact in both f32 and f64, which
/// makes parallel-vs-serial comparisons bitwise.
template <typename T>
Matrix<T> random_integer_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                                std::uint64_t bound = 10) {
  Matrix<T> m(rows, cols);
  for (auto& x : m.data) x = static_cast<T>(rng.below(bound));
  return m;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

}  // namespace cube3d
