// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "cube3d/errors.hpp"
#include "cube3d/topology.hpp"

namespace cube3d {

/// The balanced partitionings a matrix can live in on the cube.
///
/// With p = cube side, direction triple d and rank coordinates c, writing
/// a = c[d.input], w = c[d.weight], o = c[d.output], r2 = rows/p^2 and
/// c2 = cols/p^2, the shard of the global matrix held by one rank is:
///
///   Input / Output:     rows [(w*p + a)*r2, +r2),  cols [o*cols/p, +cols/p)
///   Weight:             rows [o*rows/p, +rows/p),  cols [(a*p + w)*c2, +c2)
///   WeightOfTranspose:  rows [(a*p + w)*r2, +r2),  cols [o*cols/p, +cols/p)
///
/// Input and Output share one formula: a matmul result is an Output tagged
/// with the input/output-swapped triple, which is the next op's Input.
/// WeightOfTranspose carries the second operand of C = A*B^T: it holds,
/// shard for shard, the transpose of what B^T would hold under Weight.
enum class Layout : int { Input = 0, Weight = 1, Output = 2, WeightOfTranspose = 3 };

inline const char* layout_name(Layout l) {
  switch (l) {
    case Layout::Input: return "Input";
    case Layout::Weight: return "Weight";
    case Layout::Output: return "Output";
    case Layout::WeightOfTranspose: return "WeightOfTranspose";
  }
  return "?";
}

/// Assignment of the three cube axes to the gather/scatter roles of one
/// matmul: inputs gather along `input`, weights along `weight`, outputs
/// reduce-scatter along `output`.
struct DirectionTriple {
  Axis input = Axis::y;
  Axis weight = Axis::x;
  Axis output = Axis::z;

  void validate() const {
    if (input == weight || input == output || weight == output)
      throw DirectionClash(std::string("axes must be pairwise distinct, got (") +
                           axis_name(input) + "," + axis_name(weight) + "," + axis_name(output) +
                           ")");
  }

  /// The triple carried by a matmul result: input and output roles swap,
  /// the weight axis never moves.
  DirectionTriple swapped() const { return DirectionTriple{output, weight, input}; }

  friend bool operator==(const DirectionTriple&, const DirectionTriple&) = default;
};

inline DirectionTriple canonical_directions() { return DirectionTriple{Axis::y, Axis::x, Axis::z}; }

/// Default stored triple per layout tag: Output comes out of the canonical
/// matmul already swapped.
inline DirectionTriple default_directions(Layout layout) {
  return layout == Layout::Output ? canonical_directions().swapped() : canonical_directions();
}

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct ShardBounds {
  IndexRange rows;
  IndexRange cols;
  friend bool operator==(const ShardBounds&, const ShardBounds&) = default;
};

inline void require_divisible(std::size_t value, std::size_t divisor, const std::string& dim) {
  if (divisor == 0 || value % divisor != 0)
    throw IndivisibleShape(dim + "=" + std::to_string(value) + " must be divisible by " +
                           std::to_string(divisor));
}

/// Half-open index ranges of the shard held by rank `c` under `layout` and
/// direction triple `dirs`. Every layout requires both dimensions to be
/// divisible by p^2.
inline ShardBounds shard_bounds(Layout layout, const Coords& c, std::size_t rows, std::size_t cols,
                                int p, const DirectionTriple& dirs) {
  dirs.validate();
  const std::size_t up = static_cast<std::size_t>(p);
  require_divisible(rows, up * up, "rows");
  require_divisible(cols, up * up, "cols");
  const std::size_t r2 = rows / (up * up);
  const std::size_t c2 = cols / (up * up);
  const std::size_t a = static_cast<std::size_t>(c[dirs.input]);
  const std::size_t w = static_cast<std::size_t>(c[dirs.weight]);
  const std::size_t o = static_cast<std::size_t>(c[dirs.output]);
  switch (layout) {
    case Layout::Input:
    case Layout::Output: {
      const std::size_t r0 = (w * up + a) * r2;
      const std::size_t c0 = o * (cols / up);
      return {{r0, r0 + r2}, {c0, c0 + cols / up}};
    }
    case Layout::Weight: {
      const std::size_t r0 = o * (rows / up);
      const std::size_t c0 = (a * up + w) * c2;
      return {{r0, r0 + rows / up}, {c0, c0 + c2}};
    }
    case Layout::WeightOfTranspose: {
      const std::size_t r0 = (a * up + w) * r2;
      const std::size_t c0 = o * (cols / up);
      return {{r0, r0 + r2}, {c0, c0 + cols / up}};
    }
  }
  throw Error("unreachable layout");
}

inline ShardBounds shard_bounds(Layout layout, const Coords& c, std::size_t rows, std::size_t cols,
                                int p) {
  return shard_bounds(layout, c, rows, cols, p, default_directions(layout));
}

/// Diagonal placement of a length-N parameter vector: rank (i, j, l) holds
/// b[j*n2*p + i*n2, +n2) iff j == l, with n2 = N/p^2. The placement is the
/// same under both alternating direction parities, so the vector carries
/// no triple of its own.
inline bool diagonal_holder(const Coords& c) { return c.j == c.l; }

inline IndexRange diagonal_slice(const Coords& c, std::size_t global_len, int p) {
  const std::size_t up = static_cast<std::size_t>(p);
  require_divisible(global_len, up * up, "vector length");
  const std::size_t n2 = global_len / (up * up);
  const std::size_t b0 = static_cast<std::size_t>(c.j) * n2 * up + static_cast<std::size_t>(c.i) * n2;
  return {b0, b0 + n2};
}

}  // namespace cube3d
