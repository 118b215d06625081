// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "cube3d/errors.hpp"

namespace cube3d {

/// The three directions of the processor cube.
enum class Axis : int { x = 0, y = 1, z = 2 };

inline constexpr std::array<Axis, 3> kAllAxes = {Axis::x, Axis::y, Axis::z};

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
  }
  return "?";
}

/// Position of one rank inside the cube: i along x, j along y, l along z.
struct Coords {
  int i = 0;
  int j = 0;
  int l = 0;

  int operator[](Axis a) const {
    switch (a) {
      case Axis::x: return i;
      case Axis::y: return j;
      case Axis::z: return l;
    }
    return 0;
  }

  friend bool operator==(const Coords&, const Coords&) = default;
};

/// The ordered 1-D process group along one axis: the p ranks that differ
/// only in their coordinate on `axis`, ascending by that coordinate.
struct AxisGroup {
  Axis axis = Axis::x;
  std::vector<int> members;
  int my_position = 0;

  int size() const { return static_cast<int>(members.size()); }
};

/// A p*p*p cube of P logical ranks with row-major (i, j, l) linearization.
class CubeTopology {
public:
  CubeTopology() = default;

  explicit CubeTopology(int side) : p_(side), total_(side * side * side) {
    if (side < 1) throw NotACube("cube side must be >= 1, got " + std::to_string(side));
  }

  int p() const { return p_; }
  int size() const { return total_; }

  int rank_of(const Coords& c) const {
    check(c);
    return (c.i * p_ + c.j) * p_ + c.l;
  }

  Coords coords_of(int rank) const {
    if (rank < 0 || rank >= total_)
      throw OutOfRange("rank " + std::to_string(rank) + " not in [0, " + std::to_string(total_) + ")");
    return Coords{rank / (p_ * p_), (rank / p_) % p_, rank % p_};
  }

  AxisGroup axis_group(const Coords& c, Axis axis) const {
    check(c);
    AxisGroup g;
    g.axis = axis;
    g.my_position = c[axis];
    g.members.reserve(p_);
    for (int q = 0; q < p_; ++q) {
      Coords m = c;
      switch (axis) {
        case Axis::x: m.i = q; break;
        case Axis::y: m.j = q; break;
        case Axis::z: m.l = q; break;
      }
      g.members.push_back(rank_of(m));
    }
    return g;
  }

  /// Index of the axis line through `c` in [0, p*p); lines along one axis
  /// are identified by the two coordinates that stay fixed.
  int line_index(const Coords& c, Axis axis) const {
    check(c);
    switch (axis) {
      case Axis::x: return c.j * p_ + c.l;
      case Axis::y: return c.i * p_ + c.l;
      case Axis::z: return c.i * p_ + c.j;
    }
    return 0;
  }

private:
  void check(const Coords& c) const {
    if (c.i < 0 || c.i >= p_ || c.j < 0 || c.j >= p_ || c.l < 0 || c.l >= p_)
      throw OutOfRange("coords (" + std::to_string(c.i) + "," + std::to_string(c.j) + "," +
                       std::to_string(c.l) + ") outside cube of side " + std::to_string(p_));
  }

  int p_ = 1;
  int total_ = 1;
};

/// Builds the cube for a total rank count, which must be a perfect cube.
inline CubeTopology build_cube(int total_ranks) {
  if (total_ranks < 1) throw NotACube("rank count must be positive, got " + std::to_string(total_ranks));
  for (int side = 1; side * side * side <= total_ranks; ++side) {
    if (side * side * side == total_ranks) return CubeTopology(side);
  }
  throw NotACube(std::to_string(total_ranks) + " has no integer cube root");
}

}  // namespace cube3d
