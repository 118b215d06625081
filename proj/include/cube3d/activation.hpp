// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cube3d/layout.hpp"
#include "cube3d/matrix.hpp"
#include "cube3d/sharding.hpp"
#include "cube3d/topology.hpp"

namespace cube3d {

/// Which of the two alternating axes currently serves as a tensor's input
/// direction. Group 0 is axis y, group 1 is axis z; the weight direction
/// stays on axis x throughout.
struct GroupState {
  int input_group = 0;

  void toggle() { input_group = 1 - input_group; }

  friend bool operator==(const GroupState&, const GroupState&) = default;
};

inline Axis axis_of_group(int group) {
  if (group != 0 && group != 1) throw GroupMismatch("group index must be 0 or 1");
  return group == 0 ? Axis::y : Axis::z;
}

inline DirectionTriple triple_for_group(int group) {
  return DirectionTriple{axis_of_group(group), Axis::x, axis_of_group(1 - group)};
}

/// One rank's [b/p, s/p, h/p] slice of a global [b, s, h] activation,
/// stored as its flattened [b*s/p^2, h/p] matrix view. The batch dimension
/// rides the weight axis (x), the sequence dimension rides the current
/// input axis, and the hidden dimension rides the current output axis.
template <typename T>
struct Activation3D {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t hidden = 0;
  int group = 0;
  Coords owner;
  int p = 1;
  Matrix<T> local;  // rows = (b/p)*(s/p) with the batch index major, cols = h/p

  std::size_t local_batch() const { return batch / p; }
  std::size_t local_seq() const { return seq / p; }
  std::size_t local_hidden() const { return hidden / p; }

  void check_shape() const {
    if (local.rows != local_batch() * local_seq() || local.cols != local_hidden())
      throw ShapeMismatch("activation local block is " + std::to_string(local.rows) + "x" +
                          std::to_string(local.cols) + ", expected " +
                          std::to_string(local_batch() * local_seq()) + "x" +
                          std::to_string(local_hidden()));
  }
};

/// The activation's matrix view: an Input-layout shard of the global
/// (b*s, h) matrix under the group's direction triple. flatten/unflatten
/// are exact inverses.
template <typename T>
ShardedMatrix<T> flatten(const Activation3D<T>& act) {
  act.check_shape();
  ShardedMatrix<T> sm;
  sm.global_rows = act.batch * act.seq;
  sm.global_cols = act.hidden;
  sm.layout = Layout::Input;
  sm.dirs = triple_for_group(act.group);
  sm.owner = act.owner;
  sm.p = act.p;
  sm.shard = act.local;
  return sm;
}

template <typename T>
Activation3D<T> unflatten(const ShardedMatrix<T>& sm, std::size_t batch, std::size_t seq) {
  if (sm.global_rows != batch * seq)
    throw ShapeMismatch("matrix rows " + std::to_string(sm.global_rows) + " != batch*seq");
  int group = -1;
  for (int g : {0, 1})
    if (sm.dirs == triple_for_group(g)) group = g;
  if (group < 0) throw GroupMismatch("matrix directions do not match either activation group");
  Activation3D<T> act;
  act.batch = batch;
  act.seq = seq;
  act.hidden = sm.global_cols;
  act.group = group;
  act.owner = sm.owner;
  act.p = sm.p;
  act.local = sm.shard;
  act.check_shape();
  return act;
}

/// Distributes a global activation, given as the natural (b*s, h) matrix
/// with row index bi*s + si, onto the cube for the given group.
template <typename T>
std::vector<Activation3D<T>> activation_from_global(const Matrix<T>& global, std::size_t batch,
                                                    std::size_t seq, int group,
                                                    const CubeTopology& topo) {
  if (global.rows != batch * seq)
    throw ShapeMismatch("global activation rows != batch*seq");
  const int p = topo.p();
  const std::size_t up = static_cast<std::size_t>(p);
  require_divisible(batch, up, "batch");
  require_divisible(seq, up, "seq");
  require_divisible(global.cols, up * up, "hidden");
  const std::size_t bl = batch / up, sl = seq / up, hl = global.cols / up;
  std::vector<Activation3D<T>> out;
  out.reserve(topo.size());
  for (int r = 0; r < topo.size(); ++r) {
    const Coords c = topo.coords_of(r);
    const std::size_t w = static_cast<std::size_t>(c[Axis::x]);
    const std::size_t a = static_cast<std::size_t>(c[axis_of_group(group)]);
    const std::size_t o = static_cast<std::size_t>(c[axis_of_group(1 - group)]);
    Activation3D<T> act;
    act.batch = batch;
    act.seq = seq;
    act.hidden = global.cols;
    act.group = group;
    act.owner = c;
    act.p = p;
    act.local = Matrix<T>(bl * sl, hl);
    for (std::size_t bi = 0; bi < bl; ++bi)
      for (std::size_t si = 0; si < sl; ++si)
        for (std::size_t t = 0; t < hl; ++t)
          act.local(bi * sl + si, t) =
              global((w * bl + bi) * seq + (a * sl + si), o * hl + t);
    out.push_back(std::move(act));
  }
  return out;
}

/// Inverse of activation_from_global.
template <typename T>
Matrix<T> activation_to_global(const std::vector<Activation3D<T>>& family) {
  if (family.empty()) throw InconsistentFamily("empty activation family");
  const auto& head = family.front();
  const std::size_t expect = static_cast<std::size_t>(head.p) * head.p * head.p;
  if (family.size() != expect) throw InconsistentFamily("activation family size mismatch");
  Matrix<T> global(head.batch * head.seq, head.hidden);
  const std::size_t bl = head.local_batch(), sl = head.local_seq(), hl = head.local_hidden();
  for (const auto& act : family) {
    if (act.batch != head.batch || act.seq != head.seq || act.hidden != head.hidden ||
        act.group != head.group || act.p != head.p)
      throw InconsistentFamily("mixed activation metadata");
    act.check_shape();
    const std::size_t w = static_cast<std::size_t>(act.owner[Axis::x]);
    const std::size_t a = static_cast<std::size_t>(act.owner[axis_of_group(act.group)]);
    const std::size_t o = static_cast<std::size_t>(act.owner[axis_of_group(1 - act.group)]);
    for (std::size_t bi = 0; bi < bl; ++bi)
      for (std::size_t si = 0; si < sl; ++si)
        for (std::size_t t = 0; t < hl; ++t)
          global((w * bl + bi) * head.seq + (a * sl + si), o * hl + t) =
              act.local(bi * sl + si, t);
  }
  return global;
}

}  // namespace cube3d
