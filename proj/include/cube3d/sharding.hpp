// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cube3d/layout.hpp"
#include "cube3d/matrix.hpp"
#include "cube3d/topology.hpp"

namespace cube3d {

/// One rank's balanced shard of a globally (rows x cols)-shaped matrix,
/// tagged with its layout, its direction triple and its owner.
template <typename T>
struct ShardedMatrix {
  std::size_t global_rows = 0;
  std::size_t global_cols = 0;
  Layout layout = Layout::Input;
  DirectionTriple dirs;
  Coords owner;
  int p = 1;
  Matrix<T> shard;

  ShardBounds bounds() const { return shard_bounds(layout, owner, global_rows, global_cols, p, dirs); }

  bool meta_equals(const ShardedMatrix& o) const {
    return global_rows == o.global_rows && global_cols == o.global_cols && layout == o.layout &&
           dirs == o.dirs && p == o.p;
  }
};

/// A length-N parameter vector stored diagonally on the B plane: only
/// ranks with j == l hold a slice, and those slices tile [0, N) exactly.
template <typename T>
struct DiagonalVector {
  std::size_t global_len = 0;
  Coords owner;
  int p = 1;
  std::vector<T> shard;  // empty on non-diagonal ranks

  bool holds() const { return diagonal_holder(owner); }
  IndexRange slice() const { return diagonal_slice(owner, global_len, p); }
};

/// Splits a global matrix into one shard per rank. The test/CLI side of
/// the transport: rank workers receive their entry by rank index.
template <typename T>
std::vector<ShardedMatrix<T>> partition(const Matrix<T>& gm, Layout layout, const CubeTopology& topo,
                                        const DirectionTriple& dirs) {
  dirs.validate();
  std::vector<ShardedMatrix<T>> out;
  out.reserve(topo.size());
  for (int r = 0; r < topo.size(); ++r) {
    const Coords c = topo.coords_of(r);
    const ShardBounds b = shard_bounds(layout, c, gm.rows, gm.cols, topo.p(), dirs);
    ShardedMatrix<T> sm;
    sm.global_rows = gm.rows;
    sm.global_cols = gm.cols;
    sm.layout = layout;
    sm.dirs = dirs;
    sm.owner = c;
    sm.p = topo.p();
    sm.shard = gm.block(b.rows.begin, b.rows.end, b.cols.begin, b.cols.end);
    out.push_back(std::move(sm));
  }
  return out;
}

template <typename T>
std::vector<ShardedMatrix<T>> partition(const Matrix<T>& gm, Layout layout,
                                        const CubeTopology& topo) {
  return partition(gm, layout, topo, default_directions(layout));
}

/// Inverse of partition; the family must be one consistent whole.
template <typename T>
Matrix<T> collect(const std::vector<ShardedMatrix<T>>& family) {
  if (family.empty()) throw InconsistentFamily("empty shard family");
  const ShardedMatrix<T>& head = family.front();
  const std::size_t expect = static_cast<std::size_t>(head.p) * head.p * head.p;
  if (family.size() != expect)
    throw InconsistentFamily("family has " + std::to_string(family.size()) + " shards, expected " +
                             std::to_string(expect));
  Matrix<T> gm(head.global_rows, head.global_cols);
  for (const auto& sm : family) {
    if (!sm.meta_equals(head))
      throw InconsistentFamily("mixed layouts/shapes/directions in one shard family");
    const ShardBounds b = sm.bounds();
    if (sm.shard.rows != b.rows.size() || sm.shard.cols != b.cols.size())
      throw InconsistentFamily("shard shape does not match its bounds");
    gm.set_block(b.rows.begin, b.cols.begin, sm.shard);
  }
  return gm;
}

template <typename T>
std::vector<DiagonalVector<T>> partition_diagonal(const std::vector<T>& vec,
                                                  const CubeTopology& topo) {
  std::vector<DiagonalVector<T>> out;
  out.reserve(topo.size());
  for (int r = 0; r < topo.size(); ++r) {
    const Coords c = topo.coords_of(r);
    DiagonalVector<T> dv;
    dv.global_len = vec.size();
    dv.owner = c;
    dv.p = topo.p();
    if (diagonal_holder(c)) {
      const IndexRange s = diagonal_slice(c, vec.size(), topo.p());
      dv.shard.assign(vec.begin() + static_cast<std::ptrdiff_t>(s.begin),
                      vec.begin() + static_cast<std::ptrdiff_t>(s.end));
    }
    out.push_back(std::move(dv));
  }
  return out;
}

template <typename T>
std::vector<T> collect_diagonal(const std::vector<DiagonalVector<T>>& family) {
  if (family.empty()) throw InconsistentFamily("empty diagonal family");
  const std::size_t n = family.front().global_len;
  const int p = family.front().p;
  std::vector<T> out(n, T(0));
  std::vector<bool> seen(n, false);
  for (const auto& dv : family) {
    if (dv.global_len != n || dv.p != p)
      throw InconsistentFamily("mixed lengths in one diagonal family");
    if (!dv.holds()) {
      if (!dv.shard.empty()) throw InconsistentFamily("non-diagonal rank holds vector data");
      continue;
    }
    const IndexRange s = dv.slice();
    if (dv.shard.size() != s.size()) throw InconsistentFamily("diagonal slice length mismatch");
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (seen[s.begin + t]) throw InconsistentFamily("diagonal slices overlap");
      seen[s.begin + t] = true;
      out[s.begin + t] = dv.shard[t];
    }
  }
  for (std::size_t t = 0; t < n; ++t)
    if (!seen[t]) throw InconsistentFamily("diagonal slices do not cover the vector");
  return out;
}

/// The per-processor element count of the balanced A/B/C placement:
/// (M/p^2)(N/p) + (N/p)(K/p^2) + (M/p^2)(K/p). Equals the measured
/// max-over-ranks stored elements; enforced by tests.
inline std::uint64_t per_rank_memory(std::size_t m, std::size_t n, std::size_t k, int p) {
  const std::size_t up = static_cast<std::size_t>(p);
  require_divisible(m, up * up, "M");
  require_divisible(n, up * up, "N");
  require_divisible(k, up * up, "K");
  return static_cast<std::uint64_t>(m / (up * up)) * (n / up) +
         static_cast<std::uint64_t>(n / up) * (k / (up * up)) +
         static_cast<std::uint64_t>(m / (up * up)) * (k / up);
}

}  // namespace cube3d
