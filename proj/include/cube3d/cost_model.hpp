// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "cube3d/nn.hpp"
#include "cube3d/sharding.hpp"

namespace cube3d {

/// Analytic per-rank costs of one forward 3-D matmul of global shapes
/// (M,N) x (N,K): memory (M/p^2)(N/p) + (N/p)(K/p^2) + (M/p^2)(K/p),
/// multiply-adds (M/p)(N/p)(K/p), elements moved (p-1)(MN+NK+MK)/p^3,
/// and 3 collective rounds of ceil(log2 p) hops each.
struct CostPrediction {
  std::uint64_t memory_elems = 0;
  std::uint64_t multiply_adds = 0;
  std::uint64_t comm_elems = 0;
  std::uint64_t latency_hops = 0;
};

inline std::uint64_t ceil_log2(std::uint64_t p) {
  std::uint64_t hops = 0;
  std::uint64_t reach = 1;
  while (reach < p) {
    reach *= 2;
    ++hops;
  }
  return hops;
}

inline CostPrediction predict_costs(std::uint64_t m, std::uint64_t n, std::uint64_t k, int p) {
  const std::uint64_t up = static_cast<std::uint64_t>(p);
  require_divisible(m, up * up, "M");
  require_divisible(n, up * up, "N");
  require_divisible(k, up * up, "K");
  const std::uint64_t p3 = up * up * up;
  CostPrediction c;
  c.memory_elems = per_rank_memory(m, n, k, p);
  c.multiply_adds = (m / up) * (n / up) * (k / up);
  c.comm_elems = (up - 1) * (m * n + n * k + m * k) / p3;
  c.latency_hops = 3 * ceil_log2(up);
  return c;
}

// ---------------------------------------------------------------------------
// Global traffic totals (elements sent == elements received, summed over
// all P ranks) for every collective op the layers execute. These are the
// single source of truth the zero-unaccounted-traffic checks compare
// measured counters against, so each formula mirrors its op exactly.

namespace traffic {

// One gather/multiply/scatter product over operands of the given element
// counts; all three matmul forms move (p-1)(|A|+|B|+|C|) in total.
inline std::uint64_t matmul(std::uint64_t m, std::uint64_t n, std::uint64_t k, int p) {
  return static_cast<std::uint64_t>(p - 1) * (m * n + n * k + m * k);
}

inline std::uint64_t matmul_bwd(std::uint64_t m, std::uint64_t n, std::uint64_t k, int p) {
  return 2 * matmul(m, n, k, p);
}

/// broadcast(n2) along the input axis + all_gather(n2) along the weight
/// axis, n2 = len/p^2: the diagonal expansion of add_vec/mul_vec/LN params.
inline std::uint64_t diagonal_expand(std::uint64_t len, int p) {
  const std::uint64_t up = static_cast<std::uint64_t>(p);
  return (up - 1) * len + (up - 1) * len * up;
}

/// reduce_scatter + all_reduce onto the diagonal ranks: the adjoint path.
inline std::uint64_t diagonal_reduce(std::uint64_t len, int p) {
  const std::uint64_t up = static_cast<std::uint64_t>(p);
  return 2 * (up - 1) * len * up;
}

inline std::uint64_t add_vec_fwd(std::uint64_t len, int p) { return diagonal_expand(len, p); }
inline std::uint64_t add_vec_bwd(std::uint64_t len, int p) { return diagonal_reduce(len, p); }
inline std::uint64_t mul_vec_fwd(std::uint64_t len, int p) { return diagonal_expand(len, p); }
inline std::uint64_t mul_vec_bwd(std::uint64_t len, int p) { return diagonal_reduce(len, p); }

inline std::uint64_t linear_fwd(std::uint64_t rows, std::uint64_t h_in, std::uint64_t h_out,
                                int p) {
  return matmul(rows, h_in, h_out, p) + add_vec_fwd(h_out, p);
}

inline std::uint64_t linear_bwd(std::uint64_t rows, std::uint64_t h_in, std::uint64_t h_out,
                                int p) {
  return matmul_bwd(rows, h_in, h_out, p) + add_vec_bwd(h_out, p);
}

/// Two stat all-reduces of one value per local row plus the gamma and
/// beta expansions.
inline std::uint64_t layernorm_fwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t p3 = up * up * up;
  const std::uint64_t rows_local = cfg.batch * cfg.seq / (up * up);
  return 2 * p3 * (up - 1) * rows_local + 2 * diagonal_expand(cfg.hidden, cfg.p);
}

inline std::uint64_t layernorm_bwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t p3 = up * up * up;
  const std::uint64_t rows_local = cfg.batch * cfg.seq / (up * up);
  return 2 * p3 * (up - 1) * rows_local + 2 * diagonal_reduce(cfg.hidden, cfg.p);
}

/// Per-head score/context products along the key-partition axis: each of
/// the batch*heads/p^2 local slices all-gathers its query block, runs the
/// max and sum softmax all-reduces, and reduce-scatters the context.
inline std::uint64_t attention_core_fwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t p3 = up * up * up;
  const std::uint64_t slices = (cfg.batch / up) * (cfg.heads / up);
  const std::uint64_t shard = (cfg.seq / up) * cfg.head_dim();
  const std::uint64_t per_rank = slices * (up - 1) * (2 * shard + 2 * cfg.seq);
  return p3 * per_rank;
}

/// Backward: all-gather the context gradient, one softmax-adjoint
/// all-reduce, reduce-scatter the query gradient.
inline std::uint64_t attention_core_bwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t p3 = up * up * up;
  const std::uint64_t slices = (cfg.batch / up) * (cfg.heads / up);
  const std::uint64_t shard = (cfg.seq / up) * cfg.head_dim();
  const std::uint64_t per_rank = slices * (up - 1) * (2 * shard + cfg.seq);
  return p3 * per_rank;
}

inline std::uint64_t attention_fwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq;
  return linear_fwd(rows, cfg.hidden, 3 * cfg.hidden, cfg.p) + attention_core_fwd(cfg) +
         linear_fwd(rows, cfg.hidden, cfg.hidden, cfg.p);
}

inline std::uint64_t attention_bwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq;
  return linear_bwd(rows, cfg.hidden, cfg.hidden, cfg.p) + attention_core_bwd(cfg) +
         linear_bwd(rows, cfg.hidden, 3 * cfg.hidden, cfg.p);
}

inline std::uint64_t mlp_fwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq;
  return linear_fwd(rows, cfg.hidden, 4 * cfg.hidden, cfg.p) +
         linear_fwd(rows, 4 * cfg.hidden, cfg.hidden, cfg.p);
}

inline std::uint64_t mlp_bwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq;
  return linear_bwd(rows, 4 * cfg.hidden, cfg.hidden, cfg.p) +
         linear_bwd(rows, cfg.hidden, 4 * cfg.hidden, cfg.p);
}

inline std::uint64_t transformer_layer_fwd(const TransformerConfig& cfg) {
  return 2 * layernorm_fwd(cfg) + attention_fwd(cfg) + mlp_fwd(cfg);
}

inline std::uint64_t transformer_layer_bwd(const TransformerConfig& cfg) {
  return 2 * layernorm_bwd(cfg) + attention_bwd(cfg) + mlp_bwd(cfg);
}

}  // namespace traffic

// ---------------------------------------------------------------------------
// Per-rank multiply-add counts; uniform across ranks by the balance
// property. Elementwise work (GELU, softmax scaling, residuals) is not
// kernel work and is not counted.

namespace madds {

inline std::uint64_t matmul(std::uint64_t m, std::uint64_t n, std::uint64_t k, int p) {
  const std::uint64_t up = static_cast<std::uint64_t>(p);
  return (m / up) * (n / up) * (k / up);
}

inline std::uint64_t matmul_bwd(std::uint64_t m, std::uint64_t n, std::uint64_t k, int p) {
  return 2 * matmul(m, n, k, p);
}

inline std::uint64_t attention_core_fwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t slices = (cfg.batch / up) * (cfg.heads / up);
  return slices * 2 * cfg.seq * (cfg.seq / up) * cfg.head_dim();
}

inline std::uint64_t attention_core_bwd(const TransformerConfig& cfg) {
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t slices = (cfg.batch / up) * (cfg.heads / up);
  return slices * 4 * cfg.seq * (cfg.seq / up) * cfg.head_dim();
}

inline std::uint64_t transformer_layer_fwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq, h = cfg.hidden;
  return matmul(rows, h, 3 * h, cfg.p) + attention_core_fwd(cfg) + matmul(rows, h, h, cfg.p) +
         matmul(rows, h, 4 * h, cfg.p) + matmul(rows, 4 * h, h, cfg.p);
}

inline std::uint64_t transformer_layer_bwd(const TransformerConfig& cfg) {
  const std::uint64_t rows = cfg.batch * cfg.seq, h = cfg.hidden;
  return matmul_bwd(rows, h, 3 * h, cfg.p) + attention_core_bwd(cfg) +
         matmul_bwd(rows, h, h, cfg.p) + matmul_bwd(rows, h, 4 * h, cfg.p) +
         matmul_bwd(rows, 4 * h, h, cfg.p);
}

}  // namespace madds

/// Layer-level cost prediction over a TransformerConfig. Memory counts the
/// per-rank parameter shards (12h^2/p^3 weight elements) plus one
/// activation block (b*s*h/p^3); comm is the per-rank average of the
/// global totals; hops count collective rounds times ceil(log2 p).
struct LayerCostPrediction {
  CostPrediction fwd;
  CostPrediction bwd;
};

inline LayerCostPrediction predict_layer_costs(const TransformerConfig& cfg) {
  cfg.validate();
  const std::uint64_t up = static_cast<std::uint64_t>(cfg.p);
  const std::uint64_t p3 = up * up * up;
  const std::uint64_t h = cfg.hidden;
  const std::uint64_t slices = (cfg.batch / up) * (cfg.heads / up);
  LayerCostPrediction out;
  out.fwd.memory_elems = 12 * h * h / p3 + cfg.batch * cfg.seq * h / p3;
  out.bwd.memory_elems = out.fwd.memory_elems;
  out.fwd.multiply_adds = madds::transformer_layer_fwd(cfg);
  out.bwd.multiply_adds = madds::transformer_layer_bwd(cfg);
  out.fwd.comm_elems = traffic::transformer_layer_fwd(cfg) / p3;
  out.bwd.comm_elems = traffic::transformer_layer_bwd(cfg) / p3;
  // Rounds: 4 linears (3 matmul + 2 vec each), 2 layer norms (6 each),
  // attention core (4 per slice fwd, 3 bwd).
  out.fwd.latency_hops = (4 * 5 + 2 * 6 + slices * 4) * ceil_log2(up);
  out.bwd.latency_hops = (4 * 8 + 2 * 6 + slices * 3) * ceil_log2(up);
  return out;
}

}  // namespace cube3d
