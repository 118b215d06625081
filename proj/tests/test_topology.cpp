// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "cube3d/topology.hpp"

using namespace cube3d;

TEST_CASE("build_cube accepts perfect cubes only") {
  CHECK(build_cube(8).p() == 2);
  CHECK(build_cube(1).p() == 1);
  CHECK(build_cube(27).p() == 3);
  CHECK_THROWS_AS(build_cube(12), NotACube);
  CHECK_THROWS_AS(build_cube(0), NotACube);
}

TEST_CASE("rank linearization is i-major") {
  CubeTopology t(2);
  CHECK(t.rank_of({0, 0, 0}) == 0);
  CHECK(t.rank_of({1, 0, 1}) == 5);
  CHECK(t.rank_of({1, 1, 1}) == 7);
  CHECK_THROWS_AS(t.rank_of({2, 0, 0}), OutOfRange);
}

TEST_CASE("rank_of and coords_of are mutually inverse") {
  for (int p : {1, 2, 3}) {
    CubeTopology t(p);
    for (int r = 0; r < t.size(); ++r) {
      const Coords c = t.coords_of(r);
      CHECK(t.rank_of(c) == r);
      CHECK(c.i >= 0);
      CHECK(c.i < p);
      CHECK(c.j < p);
      CHECK(c.l < p);
    }
  }
}

TEST_CASE("axis groups match the stated examples") {
  CubeTopology t(2);
  AxisGroup gy = t.axis_group({0, 0, 0}, Axis::y);
  CHECK(gy.members == std::vector<int>{0, 2});
  CHECK(gy.my_position == 0);
  AxisGroup gz = t.axis_group({1, 1, 1}, Axis::z);
  CHECK(gz.members == std::vector<int>{6, 7});
  CHECK(gz.my_position == 1);

  CubeTopology t1(1);
  for (Axis a : kAllAxes) CHECK(t1.axis_group({0, 0, 0}, a).members == std::vector<int>{0});
}

TEST_CASE("each axis partitions the ranks into p^2 disjoint groups of p") {
  for (int p : {2, 3}) {
    CubeTopology t(p);
    for (Axis axis : kAllAxes) {
      std::set<std::vector<int>> groups;
      std::multiset<int> covered;
      for (int r = 0; r < t.size(); ++r) {
        AxisGroup g = t.axis_group(t.coords_of(r), axis);
        CHECK(g.size() == p);
        CHECK(g.members[g.my_position] == r);
        // ascending along the varying coordinate
        for (int q = 0; q < p; ++q) CHECK(t.coords_of(g.members[q])[axis] == q);
        if (groups.insert(g.members).second)
          for (int m : g.members) covered.insert(m);
      }
      CHECK(groups.size() == static_cast<std::size_t>(p * p));
      CHECK(covered.size() == static_cast<std::size_t>(t.size()));
      // every rank in exactly one group per axis
      std::set<int> unique_members(covered.begin(), covered.end());
      CHECK(unique_members.size() == covered.size());
    }
  }
}

TEST_CASE("line indices number p^2 lines per axis") {
  CubeTopology t(3);
  for (Axis axis : kAllAxes) {
    std::set<int> lines;
    for (int r = 0; r < t.size(); ++r) lines.insert(t.line_index(t.coords_of(r), axis));
    CHECK(lines.size() == 9);
    CHECK(*lines.begin() == 0);
    CHECK(*lines.rbegin() == 8);
  }
}
