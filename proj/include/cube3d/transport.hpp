// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cube3d/counters.hpp"
#include "cube3d/errors.hpp"
#include "cube3d/topology.hpp"

namespace cube3d {

enum class ReduceOp : int { sum = 0, max = 1 };

/// How the P rank workers are driven. Both schedulers must produce bitwise
/// identical results; collectives use a fixed ascending-position reduction
/// order, so results never depend on arrival order.
enum class Scheduler { threads, lockstep };

namespace detail {

struct RoundHeader {
  CollectiveKind kind = CollectiveKind::barrier;
  ReduceOp op = ReduceOp::sum;
  std::uint64_t len = 0;
  int root = -1;
  std::uint64_t seq = 0;

  friend bool operator==(const RoundHeader&, const RoundHeader&) = default;
};

/// Rendezvous state for one process group. Every member of the group calls
/// collectively; the last arriver computes the round result under the slot
/// lock, then everybody copies its share out and the last one to leave
/// reopens the slot for the next round.
template <typename T>
struct GroupSlot {
  std::mutex m;
  std::condition_variable cv;
  int group_size = 0;
  int arrived = 0;
  int departed = 0;
  bool open = true;
  bool resolved = false;
  RoundHeader header;
  std::vector<const T*> inputs;
  std::vector<T> result;
  bool failed = false;
  bool failed_is_length = false;
  std::string fail_msg;

  void init(int size) {
    group_size = size;
    inputs.assign(size, nullptr);
  }

  [[noreturn]] void fail_locked(bool is_length, const std::string& msg) {
    failed = true;
    failed_is_length = is_length;
    fail_msg = msg;
    cv.notify_all();
    throw_failure();
  }

  [[noreturn]] void throw_failure() const {
    if (failed_is_length) throw LengthMismatch(fail_msg);
    throw Desync(fail_msg);
  }
};

}  // namespace detail

template <typename T>
class Endpoint;

/// Deterministic in-process transport shared by all P rank workers. Holds
/// one rendezvous slot per axis line plus a world slot, and the per-rank
/// cost counters.
template <typename T>
class Transport {
public:
  explicit Transport(CubeTopology topo, Scheduler scheduler = Scheduler::threads,
                     std::chrono::milliseconds timeout = std::chrono::minutes(2))
      : topo_(topo), scheduler_(scheduler), timeout_(timeout) {
    const int p = topo_.p();
    line_slots_.resize(3);
    for (auto& per_axis : line_slots_) {
      per_axis = std::vector<detail::GroupSlot<T>>(static_cast<std::size_t>(p) * p);
      for (auto& s : per_axis) s.init(p);
    }
    world_.init(topo_.size());
    counters_.resize(topo_.size());
  }

  Transport(const Transport&) = delete;
  Transport& operator=(const Transport&) = delete;

  const CubeTopology& topology() const { return topo_; }
  Scheduler scheduler() const { return scheduler_; }
  std::chrono::milliseconds timeout() const { return timeout_; }

  Endpoint<T> endpoint(int rank);

  /// Snapshot of one rank's counters; consistent at collective boundaries
  /// and, from the outside, once the workers have been joined.
  const CostCounters& counters(int rank) const { return counters_[rank]; }

  CostCounters total_counters() const {
    CostCounters sum;
    for (const auto& c : counters_) sum = sum + c;
    return sum;
  }

private:
  friend class Endpoint<T>;
  template <typename U, typename Body>
  friend void run_spmd(Transport<U>&, Body);

  CubeTopology topo_;
  Scheduler scheduler_;
  std::chrono::milliseconds timeout_;
  std::vector<std::vector<detail::GroupSlot<T>>> line_slots_;  // [axis][line]
  detail::GroupSlot<T> world_;
  std::vector<CostCounters> counters_;
  std::mutex turn_mutex_;  // lockstep: held by the one runnable worker
};

/// One rank's handle to the transport. Owned by exactly one worker;
/// movable between threads, never shared.
template <typename T>
class Endpoint {
public:
  Endpoint(Transport<T>* tr, int rank)
      : tr_(tr), rank_(rank), coords_(tr->topology().coords_of(rank)) {}

  Endpoint(const Endpoint&) = delete;
  Endpoint& operator=(const Endpoint&) = delete;
  Endpoint(Endpoint&&) = default;
  Endpoint& operator=(Endpoint&&) = default;

  int rank() const { return rank_; }
  const Coords& coords() const { return coords_; }
  const CubeTopology& topology() const { return tr_->topo_; }
  int p() const { return tr_->topo_.p(); }

  AxisGroup group(Axis axis) const { return tr_->topo_.axis_group(coords_, axis); }

  /// Every member passes the same declared length; the root's buffer is
  /// copied to all members. Non-roots may pass an empty span.
  std::vector<T> broadcast(Axis axis, int root_position, std::span<const T> buf, std::size_t len) {
    const int p = tr_->topo_.p();
    const int pos = coords_[axis];
    if (root_position < 0 || root_position >= p)
      throw OutOfRange("broadcast root position " + std::to_string(root_position));
    const bool is_root = pos == root_position;
    if (is_root && buf.size() != len)
      throw LengthMismatch("broadcast root holds " + std::to_string(buf.size()) +
                           " elements, declared " + std::to_string(len));
    if (p == 1) return std::vector<T>(buf.begin(), buf.end());

    detail::RoundHeader h{CollectiveKind::broadcast, ReduceOp::sum, len, root_position,
                          next_seq(axis)};
    std::vector<T> out = run_round(line_slot(axis), pos, h, is_root ? buf : std::span<const T>{},
                                   [len, root_position](const detail::GroupSlot<T>& s) {
                                     const T* src = s.inputs[root_position];
                                     return std::vector<T>(src, src + len);
                                   });
    if (is_root) {
      counters().charge(CollectiveKind::broadcast, static_cast<std::uint64_t>(p - 1) * len, 0);
    } else {
      counters().charge(CollectiveKind::broadcast, 0, len);
    }
    return out;
  }

  /// All members contribute equal-length shards and receive the shards
  /// concatenated in ascending group position.
  std::vector<T> all_gather(Axis axis, std::span<const T> shard) {
    const int p = tr_->topo_.p();
    if (p == 1) return std::vector<T>(shard.begin(), shard.end());
    const std::uint64_t s = shard.size();
    detail::RoundHeader h{CollectiveKind::all_gather, ReduceOp::sum, s, -1, next_seq(axis)};
    std::vector<T> out =
        run_round(line_slot(axis), coords_[axis], h, shard, [p, s](const detail::GroupSlot<T>& sl) {
          std::vector<T> full;
          full.reserve(static_cast<std::size_t>(p) * s);
          for (int q = 0; q < p; ++q) full.insert(full.end(), sl.inputs[q], sl.inputs[q] + s);
          return full;
        });
    counters().charge(CollectiveKind::all_gather, static_cast<std::uint64_t>(p - 1) * s,
                      static_cast<std::uint64_t>(p - 1) * s);
    return out;
  }

  /// All members contribute equal-length buffers of length p*s; the member
  /// at position q receives the elementwise sum of slice [q*s, (q+1)*s),
  /// accumulated in ascending group position.
  std::vector<T> reduce_scatter(Axis axis, std::span<const T> full) {
    const int p = tr_->topo_.p();
    if (full.size() % static_cast<std::size_t>(p) != 0)
      throw LengthMismatch("reduce_scatter buffer length " + std::to_string(full.size()) +
                           " not divisible by group size " + std::to_string(p));
    if (p == 1) return std::vector<T>(full.begin(), full.end());
    const std::uint64_t len = full.size();
    const std::uint64_t s = len / p;
    detail::RoundHeader h{CollectiveKind::reduce_scatter, ReduceOp::sum, len, -1, next_seq(axis)};
    std::vector<T> reduced =
        run_round(line_slot(axis), coords_[axis], h, full, [p, len](const detail::GroupSlot<T>& sl) {
          std::vector<T> acc(sl.inputs[0], sl.inputs[0] + len);
          for (int q = 1; q < p; ++q) {
            const T* in = sl.inputs[q];
            for (std::uint64_t t = 0; t < len; ++t) acc[t] += in[t];
          }
          return acc;
        });
    const int pos = coords_[axis];
    std::vector<T> mine(reduced.begin() + static_cast<std::ptrdiff_t>(pos * s),
                        reduced.begin() + static_cast<std::ptrdiff_t>((pos + 1) * s));
    counters().charge(CollectiveKind::reduce_scatter, static_cast<std::uint64_t>(p - 1) * s,
                      static_cast<std::uint64_t>(p - 1) * s);
    return mine;
  }

  /// Every member receives the full elementwise reduction, fixed ascending
  /// position order for sum.
  std::vector<T> all_reduce(Axis axis, std::span<const T> buf, ReduceOp op) {
    const int p = tr_->topo_.p();
    if (p == 1) return std::vector<T>(buf.begin(), buf.end());
    const std::uint64_t len = buf.size();
    detail::RoundHeader h{CollectiveKind::all_reduce, op, len, -1, next_seq(axis)};
    std::vector<T> out =
        run_round(line_slot(axis), coords_[axis], h, buf, [p, len, op](const detail::GroupSlot<T>& sl) {
          std::vector<T> acc(sl.inputs[0], sl.inputs[0] + len);
          for (int q = 1; q < p; ++q) {
            const T* in = sl.inputs[q];
            if (op == ReduceOp::sum) {
              for (std::uint64_t t = 0; t < len; ++t) acc[t] += in[t];
            } else {
              for (std::uint64_t t = 0; t < len; ++t) acc[t] = std::max(acc[t], in[t]);
            }
          }
          return acc;
        });
    counters().charge(CollectiveKind::all_reduce, static_cast<std::uint64_t>(p - 1) * len,
                      static_cast<std::uint64_t>(p - 1) * len);
    return out;
  }

  /// Collective over all P ranks; no payload, no traffic charge.
  void barrier() {
    if (tr_->topo_.size() == 1) return;
    detail::RoundHeader h{CollectiveKind::barrier, ReduceOp::sum, 0, -1, world_seq_++};
    run_round(tr_->world_, rank_, h, std::span<const T>{},
              [](const detail::GroupSlot<T>&) { return std::vector<T>{}; });
    counters().calls_by_kind[static_cast<int>(CollectiveKind::barrier)] += 1;
  }

  /// Collective over all P ranks: everyone zeroes its own counters.
  void reset_counters() {
    barrier();
    counters().reset();
    barrier();
  }

  CostCounters counters_snapshot() const { return tr_->counters_[rank_]; }

  CostCounters& counters() { return tr_->counters_[rank_]; }

  std::uint64_t& madds() { return counters().multiply_adds; }

private:
  template <typename U, typename Body>
  friend void run_spmd(Transport<U>&, Body);

  detail::GroupSlot<T>& line_slot(Axis axis) {
    return tr_->line_slots_[static_cast<int>(axis)][tr_->topo_.line_index(coords_, axis)];
  }

  std::uint64_t next_seq(Axis axis) { return seq_[static_cast<int>(axis)]++; }

  /// The shared rendezvous protocol. Returns the round result (each caller
  /// gets its own copy; reduce_scatter slices afterwards).
  template <typename Compute>
  std::vector<T> run_round(detail::GroupSlot<T>& slot, int position, const detail::RoundHeader& h,
                           std::span<const T> input, Compute compute) {
    pause_turn();
    std::vector<T> out;
    {
      std::unique_lock lk(slot.m);
      if (slot.failed) slot.throw_failure();
      if (!wait_on(slot, lk, [&] { return slot.open || slot.failed; })) {
        slot.fail_locked(false, "timed out waiting to join a collective round");
      }
      if (slot.failed) slot.throw_failure();
      if (slot.arrived == 0) {
        slot.header = h;
        slot.resolved = false;
      } else if (!(slot.header == h)) {
        const bool len_only = slot.header.kind == h.kind && slot.header.op == h.op &&
                              slot.header.root == h.root && slot.header.seq == h.seq;
        slot.fail_locked(len_only,
                         len_only ? "collective lengths disagree: " + std::to_string(slot.header.len) +
                                        " vs " + std::to_string(h.len)
                                  : "collective call sequence diverged: expected " +
                                        std::string(collective_name(slot.header.kind)) + " seq " +
                                        std::to_string(slot.header.seq) + ", got " +
                                        std::string(collective_name(h.kind)) + " seq " +
                                        std::to_string(h.seq));
      }
      slot.inputs[position] = input.data();
      ++slot.arrived;
      if (slot.arrived == slot.group_size) {
        slot.result = compute(static_cast<const detail::GroupSlot<T>&>(slot));
        slot.resolved = true;
        slot.open = false;
        slot.departed = 0;
        slot.cv.notify_all();
      } else {
        if (!wait_on(slot, lk, [&] { return slot.resolved || slot.failed; })) {
          slot.fail_locked(false, "timed out inside a collective round");
        }
        if (slot.failed) slot.throw_failure();
      }
      out = slot.result;
      if (++slot.departed == slot.group_size) {
        slot.arrived = 0;
        slot.resolved = false;
        slot.result.clear();
        slot.open = true;
        slot.cv.notify_all();
      }
    }
    resume_turn();
    return out;
  }

  template <typename Pred>
  bool wait_on(detail::GroupSlot<T>& slot, std::unique_lock<std::mutex>& lk, Pred pred) {
    return slot.cv.wait_for(lk, tr_->timeout_, pred);
  }

  void pause_turn() {
    if (turn_.owns_lock()) turn_.unlock();
  }
  void resume_turn() {
    if (turn_.mutex() != nullptr && !turn_.owns_lock()) turn_.lock();
  }

  Transport<T>* tr_;
  int rank_;
  Coords coords_;
  std::array<std::uint64_t, 3> seq_{};
  std::uint64_t world_seq_ = 0;
  std::unique_lock<std::mutex> turn_;  // engaged only under the lockstep scheduler
};

template <typename T>
Endpoint<T> Transport<T>::endpoint(int rank) {
  if (rank < 0 || rank >= topo_.size()) throw OutOfRange("endpoint rank " + std::to_string(rank));
  return Endpoint<T>(this, rank);
}

/// Runs `body(Endpoint<T>&)` once per rank, one worker per rank. Under the
/// lockstep scheduler exactly one worker is runnable at a time; it hands
/// over only while blocked inside a collective. The first raised exception
/// (lowest rank) is rethrown after all workers have stopped.
template <typename T, typename Body>
void run_spmd(Transport<T>& tr, Body body) {
  const int n = tr.topology().size();
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  workers.reserve(n);
  for (int r = 0; r < n; ++r) {
    workers.emplace_back([&tr, &body, &errors, r] {
      try {
        Endpoint<T> ep = tr.endpoint(r);
        if (tr.scheduler() == Scheduler::lockstep)
          ep.turn_ = std::unique_lock(tr.turn_mutex_);
        body(ep);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace cube3d
