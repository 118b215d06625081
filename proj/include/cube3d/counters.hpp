// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>

namespace cube3d {

enum class CollectiveKind : int {
  broadcast = 0,
  all_gather = 1,
  reduce_scatter = 2,
  all_reduce = 3,
  barrier = 4,
};

inline constexpr int kCollectiveKinds = 5;

inline const char* collective_name(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::broadcast: return "broadcast";
    case CollectiveKind::all_gather: return "all_gather";
    case CollectiveKind::reduce_scatter: return "reduce_scatter";
    case CollectiveKind::all_reduce: return "all_reduce";
    case CollectiveKind::barrier: return "barrier";
  }
  return "?";
}

/// Per-rank traffic and compute meters. Elements-moved charges follow the
/// ring-style convention: a collective over a group of p charges (p-1)/p of
/// the full payload to each participating rank, except broadcast, which
/// charges the root (p-1)*len sent and each non-root len received. Summed
/// over a group, sent always equals received.
struct CostCounters {
  std::uint64_t elements_sent = 0;
  std::uint64_t elements_received = 0;
  std::array<std::uint64_t, kCollectiveKinds> sent_by_kind{};
  std::array<std::uint64_t, kCollectiveKinds> received_by_kind{};
  std::array<std::uint64_t, kCollectiveKinds> calls_by_kind{};
  std::uint64_t multiply_adds = 0;

  void charge(CollectiveKind kind, std::uint64_t sent, std::uint64_t received) {
    elements_sent += sent;
    elements_received += received;
    sent_by_kind[static_cast<int>(kind)] += sent;
    received_by_kind[static_cast<int>(kind)] += received;
    calls_by_kind[static_cast<int>(kind)] += 1;
  }

  std::uint64_t calls(CollectiveKind kind) const { return calls_by_kind[static_cast<int>(kind)]; }

  void reset() { *this = CostCounters{}; }

  friend CostCounters operator+(CostCounters a, const CostCounters& b) {
    a.elements_sent += b.elements_sent;
    a.elements_received += b.elements_received;
    for (int k = 0; k < kCollectiveKinds; ++k) {
      a.sent_by_kind[k] += b.sent_by_kind[k];
      a.received_by_kind[k] += b.received_by_kind[k];
      a.calls_by_kind[k] += b.calls_by_kind[k];
    }
    a.multiply_adds += b.multiply_adds;
    return a;
  }
};

}  // namespace cube3d
