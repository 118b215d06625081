// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "cube3d/rng.hpp"
#include "cube3d/transport.hpp"

using namespace cube3d;

namespace {

std::vector<double> iota_vec(int rank, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (std::size_t t = 0; t < n; ++t) v[t] = scale * (rank * 100 + static_cast<int>(t));
  return v;
}

}  // namespace

TEST_CASE("broadcast copies the root buffer and charges the stated amounts") {
  Transport<double> tr(CubeTopology(2));
  std::vector<std::vector<double>> got(tr.topology().size());
  run_spmd(tr, [&](Endpoint<double>& ep) {
    const bool root = ep.coords().j == 0;
    std::vector<double> buf = root ? std::vector<double>{1, 2} : std::vector<double>{};
    got[ep.rank()] = ep.broadcast(Axis::y, 0, buf, 2);
  });
  for (const auto& v : got) CHECK(v == std::vector<double>{1, 2});
  for (int r = 0; r < 8; ++r) {
    const CostCounters& c = tr.counters(r);
    if (tr.topology().coords_of(r).j == 0) {
      CHECK(c.elements_sent == 2);  // (p-1)*len = 1*2
      CHECK(c.elements_received == 0);
    } else {
      CHECK(c.elements_sent == 0);
      CHECK(c.elements_received == 2);
    }
  }
}

TEST_CASE("broadcast on a singleton group is the identity with zero charge") {
  Transport<double> tr(CubeTopology(1));
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> buf{3, 4, 5};
    CHECK(ep.broadcast(Axis::x, 0, buf, 3) == buf);
  });
  CHECK(tr.counters(0).elements_sent == 0);
  CHECK(tr.counters(0).elements_received == 0);
}

TEST_CASE("broadcast root charge at p=3 len=4 is 8 sent") {
  Transport<double> tr(CubeTopology(3));
  run_spmd(tr, [&](Endpoint<double>& ep) {
    const bool root = ep.coords().j == 1;
    std::vector<double> buf = root ? std::vector<double>{1, 2, 3, 4} : std::vector<double>{};
    ep.broadcast(Axis::y, 1, buf, 4);
  });
  for (int r = 0; r < 27; ++r) {
    if (tr.topology().coords_of(r).j == 1) CHECK(tr.counters(r).elements_sent == 8);
  }
}

TEST_CASE("all_gather concatenates in ascending group order") {
  // in-body assertions: the lockstep scheduler serializes the workers
  Transport<double> tr(CubeTopology(2), Scheduler::lockstep);
  run_spmd(tr, [&](Endpoint<double>& ep) {
    const double base = ep.coords().l == 0 ? 1 : 3;
    std::vector<double> shard{base, base + 1};
    std::vector<double> full = ep.all_gather(Axis::z, shard);
    CHECK(full == std::vector<double>{1, 2, 3, 4});
    CHECK(ep.counters_snapshot().elements_received == 2);  // (p-1)*s
  });
}

TEST_CASE("reduce_scatter sums ascending and scatters slices") {
  Transport<double> tr(CubeTopology(2), Scheduler::lockstep);
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> mine = ep.coords().j == 0 ? std::vector<double>{1, 2, 3, 4}
                                                  : std::vector<double>{10, 20, 30, 40};
    std::vector<double> out = ep.reduce_scatter(Axis::y, mine);
    if (ep.coords().j == 0)
      CHECK(out == std::vector<double>{11, 22});
    else
      CHECK(out == std::vector<double>{33, 44});
  });
}

TEST_CASE("reduce_scatter rejects lengths not divisible by the group size") {
  Transport<double> tr(CubeTopology(2));
  CHECK_THROWS_AS(run_spmd(tr,
                           [&](Endpoint<double>& ep) {
                             std::vector<double> mine{1, 2, 3};
                             ep.reduce_scatter(Axis::y, mine);
                           }),
                  LengthMismatch);
}

TEST_CASE("all_reduce sum and max") {
  Transport<double> tr(CubeTopology(2), Scheduler::lockstep);
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> mine = ep.coords().l == 0 ? std::vector<double>{1, 2}
                                                  : std::vector<double>{3, 4};
    CHECK(ep.all_reduce(Axis::z, mine, ReduceOp::sum) == std::vector<double>{4, 6});
    std::vector<double> mx = ep.coords().l == 0 ? std::vector<double>{1, 9}
                                                : std::vector<double>{3, 4};
    CHECK(ep.all_reduce(Axis::z, mx, ReduceOp::max) == std::vector<double>{3, 9});
  });
}

TEST_CASE("self-inverse pairing: reduce_scatter of a gathered buffer with one contributor") {
  Transport<double> tr(CubeTopology(2), Scheduler::lockstep);
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> shard = iota_vec(ep.rank(), 4, 0.5);
    std::vector<double> full = ep.all_gather(Axis::x, shard);
    std::vector<double> contrib =
        ep.coords().i == 0 ? full : std::vector<double>(full.size(), 0.0);
    std::vector<double> back = ep.reduce_scatter(Axis::x, contrib);
    CHECK(back == shard);
  });
}

TEST_CASE("all_reduce(sum) equals all_gather plus local position sum") {
  for (int p : {2, 3}) {
    Transport<double> tr(CubeTopology(p), Scheduler::lockstep);
    run_spmd(tr, [&](Endpoint<double>& ep) {
      Rng rng(41 + ep.coords().j);
      std::vector<double> mine = random_vector<double>(5, rng);
      std::vector<double> reduced = ep.all_reduce(Axis::y, mine, ReduceOp::sum);
      std::vector<double> full = ep.all_gather(Axis::y, mine);
      std::vector<double> oracle(5, 0.0);
      for (int q = 0; q < ep.p(); ++q)
        for (std::size_t t = 0; t < 5; ++t) oracle[t] += full[q * 5 + t];
      CHECK(reduced == oracle);
    });
  }
}

TEST_CASE("global sent equals global received for every collective kind") {
  Transport<double> tr(CubeTopology(3));
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> v = iota_vec(ep.rank(), 6);
    ep.all_gather(Axis::x, v);
    ep.reduce_scatter(Axis::y, v);
    ep.all_reduce(Axis::z, v, ReduceOp::sum);
    ep.broadcast(Axis::x, 2, ep.coords().i == 2 ? v : std::vector<double>{}, 6);
  });
  CostCounters total = tr.total_counters();
  CHECK(total.elements_sent == total.elements_received);
  for (int k = 0; k < kCollectiveKinds; ++k)
    CHECK(total.sent_by_kind[k] == total.received_by_kind[k]);
}

TEST_CASE("counters reset is collective and zeroes everything") {
  Transport<double> tr(CubeTopology(2), Scheduler::lockstep);
  run_spmd(tr, [&](Endpoint<double>& ep) {
    std::vector<double> v(4, 1.0);
    ep.all_gather(Axis::y, v);
    ep.reset_counters();
    CHECK(ep.counters_snapshot().elements_sent == 0);
    CHECK(ep.counters_snapshot().elements_received == 0);
    std::vector<double> w(2, 1.0);
    ep.all_gather(Axis::y, w);
    CHECK(ep.counters_snapshot().elements_received == 2);
  });
}

TEST_CASE("mismatched collective kinds on one group abort loudly") {
  Transport<double> tr(CubeTopology(2), Scheduler::threads, std::chrono::seconds(10));
  CHECK_THROWS_AS(run_spmd(tr,
                           [&](Endpoint<double>& ep) {
                             std::vector<double> v{1, 2};
                             if (ep.coords().j == 0)
                               ep.all_gather(Axis::y, v);
                             else
                               ep.reduce_scatter(Axis::y, v);
                           }),
                  Desync);
}

TEST_CASE("disagreeing lengths abort as LengthMismatch") {
  Transport<double> tr(CubeTopology(2), Scheduler::threads, std::chrono::seconds(10));
  CHECK_THROWS_AS(run_spmd(tr,
                           [&](Endpoint<double>& ep) {
                             std::vector<double> v(ep.coords().j == 0 ? 2 : 4, 1.0);
                             ep.all_gather(Axis::y, v);
                           }),
                  LengthMismatch);
}

TEST_CASE("threads and lockstep schedulers produce bitwise identical results") {
  auto program = [](Endpoint<double>& ep, std::vector<double>& out) {
    Rng rng(900 + ep.rank());
    std::vector<double> v = random_vector<double>(8, rng);
    v = ep.all_gather(Axis::y, v);
    v = ep.reduce_scatter(Axis::z, v);
    v = ep.all_reduce(Axis::x, v, ReduceOp::sum);
    out = v;
  };
  std::vector<std::vector<double>> a(27), b(27);
  {
    Transport<double> tr(CubeTopology(3), Scheduler::threads);
    run_spmd(tr, [&](Endpoint<double>& ep) { program(ep, a[ep.rank()]); });
  }
  {
    Transport<double> tr(CubeTopology(3), Scheduler::lockstep);
    run_spmd(tr, [&](Endpoint<double>& ep) { program(ep, b[ep.rank()]); });
  }
  CHECK(a == b);
}
