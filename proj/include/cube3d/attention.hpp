// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cube3d/nn.hpp"

namespace cube3d {

// The Self-Attention block: fused QKV projection, per-head scaled
// dot-product attention with a distributed softmax, output projection.
// After the QKV linear the sequence dimension is partitioned along the
// new input axis; the per-head score and context products communicate
// along that axis only (all-gather the query block, keep keys and values
// local, reduce-scatter the context), and the softmax statistics are
// max/sum all-reduces along the same axis, the axis partitioning keys.
// Two linear layers mean the block preserves the group index.
//
// The fused QKV weight's output columns are ordered head-major,
// [head][q|k|v][dim], so every rank's column block holds complete q, k, v
// vectors for heads/p whole heads.

template <typename T>
struct AttentionParams {
  LinearParams<T> qkv;  // (h x 3h), input group g
  LinearParams<T> out;  // (h x h), input group 1-g
};

template <typename T>
struct AttentionSaved {
  LinearSaved<T> qkv_lin;
  LinearSaved<T> out_lin;
  struct Slice {
    Matrix<T> q_full;  // (s, dh) gathered queries
    Matrix<T> k_loc;   // (s/p, dh)
    Matrix<T> v_loc;   // (s/p, dh)
    Matrix<T> probs;   // (s, s/p) softmax weights for the local key block
  };
  std::vector<Slice> slices;  // local batch major, local head minor
};

template <typename T>
struct AttentionGrads {
  Activation3D<T> dx;
  ShardedMatrix<T> dw_qkv;
  DiagonalVector<T> db_qkv;
  ShardedMatrix<T> dw_out;
  DiagonalVector<T> db_out;
};

namespace detail {

template <typename T>
struct AttnCoreDims {
  std::size_t b_loc, s_loc, heads_loc, dh;
  Axis seq_axis;
  T scale;
};

template <typename T>
AttnCoreDims<T> attn_core_dims(const TransformerConfig& cfg, int group_after_qkv) {
  AttnCoreDims<T> d;
  d.b_loc = cfg.batch / cfg.p;
  d.s_loc = cfg.seq / cfg.p;
  d.heads_loc = cfg.heads / cfg.p;
  d.dh = cfg.head_dim();
  d.seq_axis = axis_of_group(group_after_qkv);
  d.scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d.dh)));
  return d;
}

}  // namespace detail

template <typename T>
Activation3D<T> attention_fwd(Endpoint<T>& ep, const Activation3D<T>& x,
                              const AttentionParams<T>& params, const TransformerConfig& cfg,
                              GroupState& gs, AttentionSaved<T>* saved = nullptr) {
  cfg.validate();
  if (x.hidden != cfg.hidden) throw ShapeMismatch("attention input hidden size mismatch");
  AttentionSaved<T> local_saved;
  AttentionSaved<T>& sv = saved ? *saved : local_saved;

  Activation3D<T> qkv = linear3d_fwd(ep, x, params.qkv, gs, &sv.qkv_lin);
  const auto dims = detail::attn_core_dims<T>(cfg, qkv.group);

  Activation3D<T> ctx = qkv;
  ctx.hidden = cfg.hidden;
  ctx.local = Matrix<T>(qkv.local.rows, cfg.hidden / cfg.p);
  sv.slices.clear();
  sv.slices.reserve(dims.b_loc * dims.heads_loc);

  for (std::size_t bi = 0; bi < dims.b_loc; ++bi) {
    for (std::size_t hi = 0; hi < dims.heads_loc; ++hi) {
      const std::size_t r0 = bi * dims.s_loc;
      const std::size_t base = hi * 3 * dims.dh;
      typename AttentionSaved<T>::Slice sl;
      Matrix<T> q_loc = qkv.local.block(r0, r0 + dims.s_loc, base, base + dims.dh);
      sl.k_loc = qkv.local.block(r0, r0 + dims.s_loc, base + dims.dh, base + 2 * dims.dh);
      sl.v_loc = qkv.local.block(r0, r0 + dims.s_loc, base + 2 * dims.dh, base + 3 * dims.dh);
      sl.q_full = detail::gather_rows(ep, q_loc, dims.seq_axis);  // (s, dh)

      Matrix<T> scores = multiply(sl.q_full, false, sl.k_loc, true, &ep.madds());  // (s, s/p)
      for (auto& v : scores.data) v *= dims.scale;

      std::vector<T> row_max(cfg.seq, scores.cols ? scores(0, 0) : T(0));
      for (std::size_t r = 0; r < scores.rows; ++r) {
        T m = scores(r, 0);
        for (std::size_t c = 1; c < scores.cols; ++c) m = std::max(m, scores(r, c));
        row_max[r] = m;
      }
      row_max = ep.all_reduce(dims.seq_axis, std::span<const T>(row_max), ReduceOp::max);

      std::vector<T> row_sum(cfg.seq, T(0));
      for (std::size_t r = 0; r < scores.rows; ++r)
        for (std::size_t c = 0; c < scores.cols; ++c) {
          scores(r, c) = std::exp(scores(r, c) - row_max[r]);
          row_sum[r] += scores(r, c);
        }
      row_sum = ep.all_reduce(dims.seq_axis, std::span<const T>(row_sum), ReduceOp::sum);
      for (std::size_t r = 0; r < scores.rows; ++r)
        for (std::size_t c = 0; c < scores.cols; ++c) scores(r, c) /= row_sum[r];
      sl.probs = std::move(scores);

      Matrix<T> ctx_partial = multiply(sl.probs, false, sl.v_loc, false, &ep.madds());  // (s, dh)
      Matrix<T> ctx_loc = detail::scatter_rows(ep, ctx_partial, dims.seq_axis);  // (s/p, dh)
      ctx.local.set_block(r0, hi * dims.dh, ctx_loc);
      sv.slices.push_back(std::move(sl));
    }
  }

  return linear3d_fwd(ep, ctx, params.out, gs, &sv.out_lin);
}

template <typename T>
AttentionGrads<T> attention_bwd(Endpoint<T>& ep, const Activation3D<T>& dy,
                                const AttentionSaved<T>& saved, const AttentionParams<T>& params,
                                const TransformerConfig& cfg) {
  LinearGrads<T> out_g = linear3d_bwd(ep, dy, saved.out_lin, params.out);
  Activation3D<T>& dctx = out_g.dx;
  const auto dims = detail::attn_core_dims<T>(cfg, dctx.group);

  Activation3D<T> dqkv = dctx;
  dqkv.hidden = 3 * cfg.hidden;
  dqkv.local = Matrix<T>(dctx.local.rows, 3 * cfg.hidden / cfg.p);

  for (std::size_t bi = 0; bi < dims.b_loc; ++bi) {
    for (std::size_t hi = 0; hi < dims.heads_loc; ++hi) {
      const std::size_t r0 = bi * dims.s_loc;
      const std::size_t base = hi * 3 * dims.dh;
      const auto& sl = saved.slices[bi * dims.heads_loc + hi];
      Matrix<T> dctx_loc = dctx.local.block(r0, r0 + dims.s_loc, hi * dims.dh, (hi + 1) * dims.dh);
      Matrix<T> dctx_full = detail::gather_rows(ep, dctx_loc, dims.seq_axis);  // (s, dh)

      Matrix<T> dprobs = multiply(dctx_full, false, sl.v_loc, true, &ep.madds());  // (s, s/p)
      Matrix<T> dv = multiply(sl.probs, true, dctx_full, false, &ep.madds());      // (s/p, dh)

      std::vector<T> row_dot(cfg.seq, T(0));
      for (std::size_t r = 0; r < dprobs.rows; ++r)
        for (std::size_t c = 0; c < dprobs.cols; ++c) row_dot[r] += dprobs(r, c) * sl.probs(r, c);
      row_dot = ep.all_reduce(dims.seq_axis, std::span<const T>(row_dot), ReduceOp::sum);

      Matrix<T> dscores(dprobs.rows, dprobs.cols);
      for (std::size_t r = 0; r < dprobs.rows; ++r)
        for (std::size_t c = 0; c < dprobs.cols; ++c)
          dscores(r, c) = sl.probs(r, c) * (dprobs(r, c) - row_dot[r]) * dims.scale;

      Matrix<T> dq_partial = multiply(dscores, false, sl.k_loc, false, &ep.madds());  // (s, dh)
      Matrix<T> dq = detail::scatter_rows(ep, dq_partial, dims.seq_axis);             // (s/p, dh)
      Matrix<T> dk = multiply(dscores, true, sl.q_full, false, &ep.madds());          // (s/p, dh)

      dqkv.local.set_block(r0, base, dq);
      dqkv.local.set_block(r0, base + dims.dh, dk);
      dqkv.local.set_block(r0, base + 2 * dims.dh, dv);
    }
  }

  LinearGrads<T> qkv_g = linear3d_bwd(ep, dqkv, saved.qkv_lin, params.qkv);
  AttentionGrads<T> g;
  g.dx = std::move(qkv_g.dx);
  g.dw_qkv = std::move(qkv_g.dweight);
  g.db_qkv = std::move(qkv_g.dbias);
  g.dw_out = std::move(out_g.dweight);
  g.db_out = std::move(out_g.dbias);
  return g;
}

}  // namespace cube3d
