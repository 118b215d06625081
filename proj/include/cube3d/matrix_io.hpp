// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "cube3d/errors.hpp"
#include "cube3d/matrix.hpp"

namespace cube3d {

// Binary matrix file: magic "CUBE3D\0", u8 version=1, u8 dtype
// (0 = 64-bit float, 1 = 32-bit float), u64 rows, u64 cols, little-endian,
// then rows*cols scalars row-major. Round-trips are bit-exact.

inline constexpr std::array<char, 7> kMatrixMagic = {'C', 'U', 'B', 'E', '3', 'D', '\0'};
inline constexpr std::uint8_t kMatrixVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>,
                "matrix files hold f64 or f32");
  return std::is_same_v<T, double> ? 0 : 1;
}

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  std::array<unsigned char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
  std::array<unsigned char, 8> b;
  is.read(reinterpret_cast<char*>(b.data()), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void put_scalar_le(std::ostream& os, T x) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  Bits bits;
  std::memcpy(&bits, &x, sizeof(T));
  std::array<unsigned char, sizeof(T)> b;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <typename T>
T get_scalar_le(std::istream& is) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  std::array<unsigned char, sizeof(T)> b;
  is.read(reinterpret_cast<char*>(b.data()), sizeof(T));
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<Bits>(b[i]) << (8 * i);
  T x;
  std::memcpy(&x, &bits, sizeof(T));
  return x;
}

}  // namespace detail

template <typename T>
void write_matrix(std::ostream& os, const Matrix<T>& m) {
  os.write(kMatrixMagic.data(), kMatrixMagic.size());
  os.put(static_cast<char>(kMatrixVersion));
  os.put(static_cast<char>(dtype_code<T>()));
  detail::put_u64_le(os, m.rows);
  detail::put_u64_le(os, m.cols);
  for (const T& x : m.data) detail::put_scalar_le(os, x);
  if (!os) throw IoError("failed writing matrix stream");
}

template <typename T>
Matrix<T> read_matrix(std::istream& is) {
  std::array<char, 7> magic;
  is.read(magic.data(), magic.size());
  if (!is || magic != kMatrixMagic) throw IoError("bad matrix file magic");
  const int version = is.get();
  if (version != kMatrixVersion) throw IoError("unsupported matrix file version " + std::to_string(version));
  const int dtype = is.get();
  if (dtype != dtype_code<T>())
    throw IoError("matrix file dtype " + std::to_string(dtype) + " does not match requested scalar");
  const std::uint64_t rows = detail::get_u64_le(is);
  const std::uint64_t cols = detail::get_u64_le(is);
  Matrix<T> m(rows, cols);
  for (auto& x : m.data) x = detail::get_scalar_le<T>(is);
  if (!is) throw IoError("truncated matrix file");
  return m;
}

template <typename T>
void write_matrix_file(const std::string& path, const Matrix<T>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_matrix(os, m);
}

template <typename T>
Matrix<T> read_matrix_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_matrix<T>(is);
}

/// Peeks the dtype byte so the CLI can dispatch without knowing it upfront.
inline std::uint8_t matrix_file_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::array<char, 7> magic;
  is.read(magic.data(), magic.size());
  if (!is || magic != kMatrixMagic) throw IoError("bad matrix file magic in " + path);
  is.get();  // version
  const int dtype = is.get();
  if (!is) throw IoError("truncated matrix file " + path);
  return static_cast<std::uint8_t>(dtype);
}

}  // namespace cube3d
