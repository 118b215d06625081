// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cube3d/layout.hpp"
#include "cube3d/matrix.hpp"
#include "cube3d/sharding.hpp"
#include "cube3d/transport.hpp"

namespace cube3d {

// The three matrix-matrix forms C=AB, C=AB^T, C=A^TB and the two
// matrix-vector forms C=A+b, C=A*b, forward and backward, executed
// collectively by all P ranks. Every op is a gather / local multiply /
// reduce-scatter round whose axes come from the operands' direction
// triples; backward passes run the same machinery with the input, weight
// and output roles permuted, and land each gradient in its operand's
// exact layout family.

namespace detail {

template <typename T>
void validate_shard(const ShardedMatrix<T>& sm, const char* what) {
  sm.dirs.validate();
  const ShardBounds b = sm.bounds();
  if (sm.shard.rows != b.rows.size() || sm.shard.cols != b.cols.size())
    throw ShapeMismatch(std::string(what) + " shard is " + std::to_string(sm.shard.rows) + "x" +
                        std::to_string(sm.shard.cols) + ", bounds demand " +
                        std::to_string(b.rows.size()) + "x" + std::to_string(b.cols.size()));
}

template <typename T>
void require_input_family(const ShardedMatrix<T>& sm, const char* what) {
  if (sm.layout != Layout::Input && sm.layout != Layout::Output)
    throw ShapeMismatch(std::string(what) + " must be in the Input/Output family, got " +
                        layout_name(sm.layout));
}

/// All-gather shards along `axis` and stack them as row blocks,
/// ascending group position.
template <typename T>
Matrix<T> gather_rows(Endpoint<T>& ep, const Matrix<T>& shard, Axis axis) {
  std::vector<T> full = ep.all_gather(axis, std::span<const T>(shard.data));
  return Matrix<T>(static_cast<std::size_t>(ep.p()) * shard.rows, shard.cols, std::move(full));
}

/// All-gather shards along `axis` and stack them as column blocks.
template <typename T>
Matrix<T> gather_cols(Endpoint<T>& ep, const Matrix<T>& shard, Axis axis) {
  const int p = ep.p();
  std::vector<T> flat = ep.all_gather(axis, std::span<const T>(shard.data));
  Matrix<T> out(shard.rows, static_cast<std::size_t>(p) * shard.cols);
  for (int q = 0; q < p; ++q) {
    const T* src = flat.data() + static_cast<std::size_t>(q) * shard.size();
    for (std::size_t r = 0; r < shard.rows; ++r)
      for (std::size_t c = 0; c < shard.cols; ++c)
        out(r, static_cast<std::size_t>(q) * shard.cols + c) = src[r * shard.cols + c];
  }
  return out;
}

/// Reduce-scatter the partial sums along `axis`; each rank keeps its row
/// block of the group-wide sum.
template <typename T>
Matrix<T> scatter_rows(Endpoint<T>& ep, const Matrix<T>& partial, Axis axis) {
  const int p = ep.p();
  std::vector<T> mine = ep.reduce_scatter(axis, std::span<const T>(partial.data));
  return Matrix<T>(partial.rows / p, partial.cols, std::move(mine));
}

template <typename T>
ShardedMatrix<T> make_sharded(const ShardedMatrix<T>& like, std::size_t rows, std::size_t cols,
                              Layout layout, DirectionTriple dirs, Matrix<T> shard) {
  ShardedMatrix<T> out;
  out.global_rows = rows;
  out.global_cols = cols;
  out.layout = layout;
  out.dirs = dirs;
  out.owner = like.owner;
  out.p = like.p;
  out.shard = std::move(shard);
  validate_shard(out, "result");
  return out;
}

}  // namespace detail

template <typename T>
struct MatmulGrads {
  ShardedMatrix<T> da;
  ShardedMatrix<T> db;
};

/// Forward output plus the exact forward inputs the backward needs; no
/// activation recomputation anywhere.
template <typename T>
struct GradPair {
  ShardedMatrix<T> value;
  ShardedMatrix<T> saved_a;
  ShardedMatrix<T> saved_b;
};

// ---------------------------------------------------------------------------
// C = A * B.  A: Input family (M x N), B: Weight (N x K) -> C: Output (M x K)
// with the input/output axes of the triple swapped on the result.

template <typename T>
ShardedMatrix<T> matmul_ab_fwd(Endpoint<T>& ep, const ShardedMatrix<T>& a,
                               const ShardedMatrix<T>& b) {
  detail::require_input_family(a, "A");
  if (b.layout != Layout::Weight) throw ShapeMismatch("B of C=AB must be Weight layout");
  if (!(a.dirs == b.dirs)) throw DirectionClash("A and B of C=AB must share one direction triple");
  if (a.global_cols != b.global_rows)
    throw ShapeMismatch("C=AB needs A cols == B rows, got " + std::to_string(a.global_cols) +
                        " vs " + std::to_string(b.global_rows));
  detail::validate_shard(a, "A");
  detail::validate_shard(b, "B");
  const DirectionTriple d = a.dirs;
  Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);     // (M/p, N/p)
  Matrix<T> b_full = detail::gather_cols(ep, b.shard, d.weight);    // (N/p, K/p)
  Matrix<T> partial = multiply(a_full, false, b_full, false, &ep.madds());
  Matrix<T> mine = detail::scatter_rows(ep, partial, d.output);
  return detail::make_sharded(a, a.global_rows, b.global_cols, Layout::Output, d.swapped(),
                              std::move(mine));
}

/// Backward of C=AB per the differentiation formulas dA = dC B^T (axes
/// z,x,y) and dB = A^T dC (axes y,z,x). The two products gather their
/// operands independently.
template <typename T>
MatmulGrads<T> matmul_ab_bwd(Endpoint<T>& ep, const ShardedMatrix<T>& dc,
                             const ShardedMatrix<T>& a, const ShardedMatrix<T>& b) {
  detail::require_input_family(dc, "dC");
  if (!(dc.dirs == a.dirs.swapped()))
    throw DirectionClash("dC of C=AB backward must carry the swapped triple");
  if (dc.global_rows != a.global_rows || dc.global_cols != b.global_cols)
    throw ShapeMismatch("dC shape does not match the forward output");
  detail::validate_shard(dc, "dC");
  const DirectionTriple d = a.dirs;
  MatmulGrads<T> g;
  {
    // dA = dC B^T: gather dC along its input axis (= d.output), B along the
    // weight axis, reduce-scatter along d.input.
    Matrix<T> dc_full = detail::gather_rows(ep, dc.shard, d.output);   // (M/p, K/p)
    Matrix<T> b_full = detail::gather_cols(ep, b.shard, d.weight);     // (N/p, K/p)
    Matrix<T> partial = multiply(dc_full, false, b_full, true, &ep.madds());  // (M/p, N/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.input);
    g.da = detail::make_sharded(a, a.global_rows, a.global_cols, a.layout, a.dirs, std::move(mine));
  }
  {
    // dB = A^T dC: gather A along d.input, dC along d.output, accumulate the
    // transposed partial and reduce-scatter along the weight axis.
    Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);      // (M/p, N/p)
    Matrix<T> dc_full = detail::gather_rows(ep, dc.shard, d.output);   // (M/p, K/p)
    Matrix<T> partial = multiply(dc_full, true, a_full, false, &ep.madds());  // (K/p, N/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.weight);      // (K/p^2, N/p)
    g.db = detail::make_sharded(b, b.global_rows, b.global_cols, Layout::Weight, d,
                                mine.transposed());
  }
  return g;
}

// ---------------------------------------------------------------------------
// C = A * B^T.  A: Input family (M x N), B: WeightOfTranspose (K x N)
// -> C: Output (M x K).

template <typename T>
ShardedMatrix<T> matmul_abt_fwd(Endpoint<T>& ep, const ShardedMatrix<T>& a,
                                const ShardedMatrix<T>& b) {
  detail::require_input_family(a, "A");
  if (b.layout != Layout::WeightOfTranspose)
    throw ShapeMismatch("B of C=AB^T must be WeightOfTranspose layout");
  if (!(a.dirs == b.dirs)) throw DirectionClash("A and B of C=AB^T must share one direction triple");
  if (a.global_cols != b.global_cols)
    throw ShapeMismatch("C=AB^T needs A cols == B cols, got " + std::to_string(a.global_cols) +
                        " vs " + std::to_string(b.global_cols));
  detail::validate_shard(a, "A");
  detail::validate_shard(b, "B");
  const DirectionTriple d = a.dirs;
  Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);    // (M/p, N/p)
  Matrix<T> b_full = detail::gather_rows(ep, b.shard, d.weight);   // (K/p, N/p)
  Matrix<T> partial = multiply(a_full, false, b_full, true, &ep.madds());  // (M/p, K/p)
  Matrix<T> mine = detail::scatter_rows(ep, partial, d.output);
  return detail::make_sharded(a, a.global_rows, b.global_rows, Layout::Output, d.swapped(),
                              std::move(mine));
}

/// Backward of C=AB^T: dA = dC B (axes z,x,y), dB = dC^T A (axes z,y,x).
template <typename T>
MatmulGrads<T> matmul_abt_bwd(Endpoint<T>& ep, const ShardedMatrix<T>& dc,
                              const ShardedMatrix<T>& a, const ShardedMatrix<T>& b) {
  detail::require_input_family(dc, "dC");
  if (!(dc.dirs == a.dirs.swapped()))
    throw DirectionClash("dC of C=AB^T backward must carry the swapped triple");
  if (dc.global_rows != a.global_rows || dc.global_cols != b.global_rows)
    throw ShapeMismatch("dC shape does not match the forward output");
  detail::validate_shard(dc, "dC");
  const DirectionTriple d = a.dirs;
  MatmulGrads<T> g;
  {
    Matrix<T> dc_full = detail::gather_rows(ep, dc.shard, d.output);  // (M/p, K/p)
    Matrix<T> b_full = detail::gather_rows(ep, b.shard, d.weight);    // (K/p, N/p)
    Matrix<T> partial = multiply(dc_full, false, b_full, false, &ep.madds());  // (M/p, N/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.input);
    g.da = detail::make_sharded(a, a.global_rows, a.global_cols, a.layout, a.dirs, std::move(mine));
  }
  {
    Matrix<T> dc_full = detail::gather_rows(ep, dc.shard, d.output);  // (M/p, K/p)
    Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);     // (M/p, N/p)
    Matrix<T> partial = multiply(dc_full, true, a_full, false, &ep.madds());  // (K/p, N/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.weight);     // (K/p^2, N/p)
    g.db = detail::make_sharded(b, b.global_rows, b.global_cols, Layout::WeightOfTranspose, d,
                                std::move(mine));
  }
  return g;
}

// ---------------------------------------------------------------------------
// C = A^T * B.  A: Input family (M x N), B: Input family (M x K) carrying
// the swapped triple -> C: Weight (N x K) under A's triple. This is the
// weight-gradient product: dW of Y=XW is exactly matmul_atb_fwd(X, dY).

template <typename T>
ShardedMatrix<T> matmul_atb_fwd(Endpoint<T>& ep, const ShardedMatrix<T>& a,
                                const ShardedMatrix<T>& b) {
  detail::require_input_family(a, "A");
  detail::require_input_family(b, "B");
  if (!(b.dirs == a.dirs.swapped()))
    throw DirectionClash("B of C=A^TB must carry A's swapped triple");
  if (a.global_rows != b.global_rows)
    throw ShapeMismatch("C=A^TB needs A rows == B rows, got " + std::to_string(a.global_rows) +
                        " vs " + std::to_string(b.global_rows));
  detail::validate_shard(a, "A");
  detail::validate_shard(b, "B");
  const DirectionTriple d = a.dirs;
  Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);    // (M/p, N/p)
  Matrix<T> b_full = detail::gather_rows(ep, b.shard, d.output);   // (M/p, K/p)
  Matrix<T> partial = multiply(b_full, true, a_full, false, &ep.madds());  // (K/p, N/p)
  Matrix<T> mine = detail::scatter_rows(ep, partial, d.weight);    // (K/p^2, N/p)
  return detail::make_sharded(a, a.global_cols, b.global_cols, Layout::Weight, d,
                              mine.transposed());
}

/// Backward of C=A^TB: dA = B dC^T, dB = A dC.
template <typename T>
MatmulGrads<T> matmul_atb_bwd(Endpoint<T>& ep, const ShardedMatrix<T>& dc,
                              const ShardedMatrix<T>& a, const ShardedMatrix<T>& b) {
  if (dc.layout != Layout::Weight) throw ShapeMismatch("dC of C=A^TB backward must be Weight layout");
  if (!(dc.dirs == a.dirs)) throw DirectionClash("dC of C=A^TB backward must carry A's triple");
  if (dc.global_rows != a.global_cols || dc.global_cols != b.global_cols)
    throw ShapeMismatch("dC shape does not match the forward output");
  detail::validate_shard(dc, "dC");
  const DirectionTriple d = a.dirs;
  MatmulGrads<T> g;
  {
    Matrix<T> b_full = detail::gather_rows(ep, b.shard, d.output);   // (M/p, K/p)
    Matrix<T> dc_full = detail::gather_cols(ep, dc.shard, d.weight); // (N/p, K/p)
    Matrix<T> partial = multiply(b_full, false, dc_full, true, &ep.madds());  // (M/p, N/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.input);
    g.da = detail::make_sharded(a, a.global_rows, a.global_cols, a.layout, a.dirs, std::move(mine));
  }
  {
    Matrix<T> a_full = detail::gather_rows(ep, a.shard, d.input);    // (M/p, N/p)
    Matrix<T> dc_full = detail::gather_cols(ep, dc.shard, d.weight); // (N/p, K/p)
    Matrix<T> partial = multiply(a_full, false, dc_full, false, &ep.madds());  // (M/p, K/p)
    Matrix<T> mine = detail::scatter_rows(ep, partial, d.output);
    g.db = detail::make_sharded(b, b.global_rows, b.global_cols, b.layout, b.dirs, std::move(mine));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Matrix-vector ops. The vector lives diagonally on the B plane; the
// forward broadcasts the holder's slice along the operand's input axis
// (z rather than y for Output-family operands, automatically, since the
// operand's stored triple already swapped) and all-gathers along the
// weight axis.

namespace detail {

/// Expands a diagonal vector to the length-(N/p) column block every rank
/// of the operand's plane needs: broadcast the holder's slice along the
/// operand's input axis, then all-gather along the weight axis.
template <typename T>
std::vector<T> expand_diagonal(Endpoint<T>& ep, const DirectionTriple& d, const Coords& owner,
                               const DiagonalVector<T>& vec) {
  if (ep.p() == 1) return vec.shard;
  const std::size_t n2 = vec.global_len / (static_cast<std::size_t>(ep.p()) * ep.p());
  const int root = owner[d.output];
  std::vector<T> piece =
      ep.broadcast(d.input, root,
                   vec.holds() ? std::span<const T>(vec.shard) : std::span<const T>{}, n2);
  return ep.all_gather(d.weight, std::span<const T>(piece));
}

template <typename T>
std::vector<T> expand_diagonal(Endpoint<T>& ep, const ShardedMatrix<T>& like,
                               const DiagonalVector<T>& vec) {
  if (vec.global_len != like.global_cols)
    throw ShapeMismatch("vector length " + std::to_string(vec.global_len) +
                        " does not match matrix cols " + std::to_string(like.global_cols));
  return expand_diagonal(ep, like.dirs, like.owner, vec);
}

/// Column sums reduced onto the diagonal ranks: reduce-scatter along the
/// weight axis, then sum along the operand's input axis (the adjoint of
/// the forward's broadcast); non-diagonal ranks hold nothing.
template <typename T>
DiagonalVector<T> reduce_to_diagonal(Endpoint<T>& ep, const DirectionTriple& d, const Coords& owner,
                                     std::size_t global_len, std::vector<T> column_sums) {
  DiagonalVector<T> db;
  db.global_len = global_len;
  db.owner = owner;
  db.p = ep.p();
  if (ep.p() == 1) {
    db.shard = std::move(column_sums);
    return db;
  }
  std::vector<T> slice = ep.reduce_scatter(d.weight, std::span<const T>(column_sums));
  std::vector<T> total = ep.all_reduce(d.input, std::span<const T>(slice), ReduceOp::sum);
  if (db.holds()) db.shard = std::move(total);
  return db;
}

template <typename T>
DiagonalVector<T> reduce_to_diagonal(Endpoint<T>& ep, const ShardedMatrix<T>& like,
                                     std::vector<T> column_sums) {
  return reduce_to_diagonal(ep, like.dirs, like.owner, like.global_cols, std::move(column_sums));
}

}  // namespace detail

template <typename T>
struct VecGrads {
  ShardedMatrix<T> da;
  DiagonalVector<T> db;
};

/// C = A + b rowwise. Keeps A's layout and directions.
template <typename T>
ShardedMatrix<T> add_vec_fwd(Endpoint<T>& ep, const ShardedMatrix<T>& a,
                             const DiagonalVector<T>& b) {
  detail::require_input_family(a, "A");
  detail::validate_shard(a, "A");
  const std::vector<T> addend = detail::expand_diagonal(ep, a, b);
  ShardedMatrix<T> c = a;
  for (std::size_t r = 0; r < c.shard.rows; ++r)
    for (std::size_t col = 0; col < c.shard.cols; ++col) c.shard(r, col) += addend[col];
  return c;
}

/// Backward of C = A + b: dA = dC and db = column sums of dC reduced onto
/// the diagonal ranks.
template <typename T>
VecGrads<T> add_vec_bwd(Endpoint<T>& ep, const ShardedMatrix<T>& dc) {
  detail::require_input_family(dc, "dC");
  detail::validate_shard(dc, "dC");
  std::vector<T> colsum(dc.shard.cols, T(0));
  for (std::size_t r = 0; r < dc.shard.rows; ++r)
    for (std::size_t col = 0; col < dc.shard.cols; ++col) colsum[col] += dc.shard(r, col);
  VecGrads<T> g;
  g.da = dc;
  g.db = detail::reduce_to_diagonal(ep, dc, std::move(colsum));
  return g;
}

template <typename T>
struct MulVecResult {
  ShardedMatrix<T> value;
  std::vector<T> saved_scale;  // the expanded column block of b
  Matrix<T> saved_a;
};

/// C = A * b columnwise (the elementwise-multiply variant).
template <typename T>
MulVecResult<T> mul_vec_fwd(Endpoint<T>& ep, const ShardedMatrix<T>& a,
                            const DiagonalVector<T>& b) {
  detail::require_input_family(a, "A");
  detail::validate_shard(a, "A");
  MulVecResult<T> out;
  out.saved_scale = detail::expand_diagonal(ep, a, b);
  out.saved_a = a.shard;
  out.value = a;
  for (std::size_t r = 0; r < out.value.shard.rows; ++r)
    for (std::size_t col = 0; col < out.value.shard.cols; ++col)
      out.value.shard(r, col) *= out.saved_scale[col];
  return out;
}

/// Backward of C = A * b: dA = dC * b (using the scale saved by the
/// forward, so no second broadcast), db = column sums of dC * A reduced
/// onto the diagonal ranks.
template <typename T>
VecGrads<T> mul_vec_bwd(Endpoint<T>& ep, const ShardedMatrix<T>& dc, const MulVecResult<T>& saved) {
  detail::require_input_family(dc, "dC");
  detail::validate_shard(dc, "dC");
  if (dc.shard.rows != saved.saved_a.rows || dc.shard.cols != saved.saved_a.cols)
    throw ShapeMismatch("dC shape does not match the forward input");
  VecGrads<T> g;
  g.da = dc;
  std::vector<T> colsum(dc.shard.cols, T(0));
  for (std::size_t r = 0; r < dc.shard.rows; ++r)
    for (std::size_t col = 0; col < dc.shard.cols; ++col) {
      colsum[col] += dc.shard(r, col) * saved.saved_a(r, col);
      g.da.shard(r, col) *= saved.saved_scale[col];
    }
  g.db = detail::reduce_to_diagonal(ep, dc, std::move(colsum));
  return g;
}

// ---------------------------------------------------------------------------
// Batched variants: leading local batch extent, one full collective op per
// slice. Counters equal the looped accounting by construction.

template <typename T>
struct BatchedShardedMatrix {
  std::vector<ShardedMatrix<T>> slices;

  std::size_t batch() const { return slices.size(); }
};

namespace detail {

template <typename T>
void require_same_batch(const BatchedShardedMatrix<T>& a, const BatchedShardedMatrix<T>& b) {
  if (a.batch() != b.batch())
    throw BatchMismatch("batch extents differ: " + std::to_string(a.batch()) + " vs " +
                        std::to_string(b.batch()));
}

}  // namespace detail

template <typename T, typename Fwd>
BatchedShardedMatrix<T> batched_matmul_fwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& a,
                                           const BatchedShardedMatrix<T>& b, Fwd op) {
  detail::require_same_batch(a, b);
  BatchedShardedMatrix<T> out;
  out.slices.reserve(a.batch());
  for (std::size_t t = 0; t < a.batch(); ++t) out.slices.push_back(op(ep, a.slices[t], b.slices[t]));
  return out;
}

template <typename T, typename Bwd>
std::pair<BatchedShardedMatrix<T>, BatchedShardedMatrix<T>> batched_matmul_bwd(
    Endpoint<T>& ep, const BatchedShardedMatrix<T>& dc, const BatchedShardedMatrix<T>& a,
    const BatchedShardedMatrix<T>& b, Bwd op) {
  detail::require_same_batch(a, b);
  detail::require_same_batch(a, dc);
  BatchedShardedMatrix<T> da, db;
  for (std::size_t t = 0; t < a.batch(); ++t) {
    MatmulGrads<T> g = op(ep, dc.slices[t], a.slices[t], b.slices[t]);
    da.slices.push_back(std::move(g.da));
    db.slices.push_back(std::move(g.db));
  }
  return {std::move(da), std::move(db)};
}

template <typename T>
BatchedShardedMatrix<T> batched_matmul_ab_fwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& a,
                                              const BatchedShardedMatrix<T>& b) {
  return batched_matmul_fwd(ep, a, b, matmul_ab_fwd<T>);
}
template <typename T>
BatchedShardedMatrix<T> batched_matmul_abt_fwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& a,
                                               const BatchedShardedMatrix<T>& b) {
  return batched_matmul_fwd(ep, a, b, matmul_abt_fwd<T>);
}
template <typename T>
BatchedShardedMatrix<T> batched_matmul_atb_fwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& a,
                                               const BatchedShardedMatrix<T>& b) {
  return batched_matmul_fwd(ep, a, b, matmul_atb_fwd<T>);
}
template <typename T>
auto batched_matmul_ab_bwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& dc,
                           const BatchedShardedMatrix<T>& a, const BatchedShardedMatrix<T>& b) {
  return batched_matmul_bwd(ep, dc, a, b, matmul_ab_bwd<T>);
}
template <typename T>
auto batched_matmul_abt_bwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& dc,
                            const BatchedShardedMatrix<T>& a, const BatchedShardedMatrix<T>& b) {
  return batched_matmul_bwd(ep, dc, a, b, matmul_abt_bwd<T>);
}
template <typename T>
auto batched_matmul_atb_bwd(Endpoint<T>& ep, const BatchedShardedMatrix<T>& dc,
                            const BatchedShardedMatrix<T>& a, const BatchedShardedMatrix<T>& b) {
  return batched_matmul_bwd(ep, dc, a, b, matmul_atb_bwd<T>);
}

}  // namespace cube3d
