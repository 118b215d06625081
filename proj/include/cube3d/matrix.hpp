// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cube3d/errors.hpp"

namespace cube3d {

/// Dense row-major matrix. The one value type everything in this library
/// moves around; shards, gathered blocks and global matrices all use it.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols)
      throw ShapeMismatch("matrix data length " + std::to_string(data.size()) + " != " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
  }

  /// Copies the half-open block [r0, r1) x [c0, c1) out of this matrix.
  Matrix block(std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) const {
    Matrix out(r1 - r0, c1 - c0);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) out(r - r0, c - c0) = (*this)(r, c);
    return out;
  }

  /// Writes `src` into the half-open block starting at (r0, c0).
  void set_block(std::size_t r0, std::size_t c0, const Matrix& src) {
    for (std::size_t r = 0; r < src.rows; ++r)
      for (std::size_t c = 0; c < src.cols; ++c) (*this)(r0 + r, c0 + c) = src(r, c);
  }

  Matrix transposed() const {
    Matrix out(cols, rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out(c, r) = (*this)(r, c);
    return out;
  }
};

/// C += op(A) * op(B) with a fixed i-k-j loop nest. Every output element
/// accumulates its products in ascending k order, which keeps results
/// bitwise reproducible and lets the p=1 cube agree with the serial
/// references exactly. `madds`, when given, counts multiply-adds.
template <typename T>
void multiply_accumulate(Matrix<T>& out, const Matrix<T>& a, bool trans_a, const Matrix<T>& b,
                         bool trans_b, std::uint64_t* madds = nullptr) {
  const std::size_t m = trans_a ? a.cols : a.rows;
  const std::size_t inner = trans_a ? a.rows : a.cols;
  const std::size_t inner_b = trans_b ? b.cols : b.rows;
  const std::size_t n = trans_b ? b.rows : b.cols;
  if (inner != inner_b || out.rows != m || out.cols != n)
    throw ShapeMismatch("multiply: " + std::to_string(m) + "x" + std::to_string(inner) + " * " +
                        std::to_string(inner_b) + "x" + std::to_string(n) + " -> " +
                        std::to_string(out.rows) + "x" + std::to_string(out.cols));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      const T aik = trans_a ? a(k, i) : a(i, k);
      T* out_row = &out.data[i * out.cols];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b(j, k);
      } else {
        const T* b_row = &b.data[k * b.cols];
        for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
      }
    }
  }
  if (madds) *madds += static_cast<std::uint64_t>(m) * inner * n;
}

template <typename T>
Matrix<T> multiply(const Matrix<T>& a, bool trans_a, const Matrix<T>& b, bool trans_b,
                   std::uint64_t* madds = nullptr) {
  Matrix<T> out(trans_a ? a.cols : a.rows, trans_b ? b.rows : b.cols);
  multiply_accumulate(out, a, trans_a, b, trans_b, madds);
  return out;
}

}  // namespace cube3d
