// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cube3d/activation.hpp"
#include "cube3d/ops3d.hpp"

namespace cube3d {

struct TransformerConfig {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
  std::size_t hidden = 0;
  int p = 1;
  std::size_t layers = 1;
  double eps = 1e-5;

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    const std::size_t up = static_cast<std::size_t>(p);
    if (p < 1) throw ConfigInvalid("cube side must be >= 1");
    if (batch == 0 || seq == 0 || heads == 0 || hidden == 0)
      throw ConfigInvalid("batch, seq, heads and hidden must be positive");
    if (batch % up != 0) throw ConfigInvalid("batch must be divisible by p");
    if (seq % up != 0) throw ConfigInvalid("seq must be divisible by p");
    if (hidden % (up * up) != 0) throw ConfigInvalid("hidden must be divisible by p^2");
    if (4 * hidden % (up * up) != 0) throw ConfigInvalid("4*hidden must be divisible by p^2");
    if (heads % up != 0)
      throw HeadsIndivisible("heads=" + std::to_string(heads) + " not divisible by p=" +
                             std::to_string(p));
    if (hidden % heads != 0) throw ConfigInvalid("hidden must be divisible by heads");
  }
};

// GELU, the exact erf form; perfectly balanced since it is elementwise.
template <typename T>
T gelu(T x) {
  const double xd = static_cast<double>(x);
  return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * 0.7071067811865476)));
}

template <typename T>
T gelu_grad(T x) {
  const double xd = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
  const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;
  return static_cast<T>(cdf + xd * pdf);
}

// ---------------------------------------------------------------------------
// 3-D linear layer: flatten -> C = X W -> C + b -> unflatten, with the
// input/output directions exchanged on the way out.

template <typename T>
struct LinearParams {
  ShardedMatrix<T> weight;   // Weight layout (h_in x h_out) under triple_for_group(input_group)
  DiagonalVector<T> bias;    // length h_out
  int input_group = 0;
};

template <typename T>
struct LinearSaved {
  ShardedMatrix<T> x_flat;
};

template <typename T>
struct LinearGrads {
  Activation3D<T> dx;
  ShardedMatrix<T> dweight;
  DiagonalVector<T> dbias;
};

template <typename T>
Activation3D<T> linear3d_fwd(Endpoint<T>& ep, const Activation3D<T>& x,
                             const LinearParams<T>& params, GroupState& gs,
                             LinearSaved<T>* saved = nullptr) {
  if (x.group != gs.input_group)
    throw GroupMismatch("activation group " + std::to_string(x.group) +
                        " does not match state " + std::to_string(gs.input_group));
  if (params.input_group != x.group)
    throw GroupMismatch("layer parameters were partitioned for input group " +
                        std::to_string(params.input_group));
  ShardedMatrix<T> xf = flatten(x);
  ShardedMatrix<T> c = matmul_ab_fwd(ep, xf, params.weight);
  c = add_vec_fwd(ep, c, params.bias);
  if (saved) saved->x_flat = std::move(xf);
  gs.toggle();
  return unflatten(c, x.batch, x.seq);
}

template <typename T>
LinearGrads<T> linear3d_bwd(Endpoint<T>& ep, const Activation3D<T>& dy,
                            const LinearSaved<T>& saved, const LinearParams<T>& params) {
  if (dy.group != 1 - params.input_group)
    throw GroupMismatch("upstream gradient group does not match the layer output group");
  ShardedMatrix<T> dyf = flatten(dy);
  VecGrads<T> vec = add_vec_bwd(ep, dyf);
  MatmulGrads<T> mm = matmul_ab_bwd(ep, vec.da, saved.x_flat, params.weight);
  LinearGrads<T> g;
  g.dx = unflatten(mm.da, dy.batch, dy.seq);
  g.dweight = std::move(mm.db);
  g.dbias = std::move(vec.db);
  return g;
}

// ---------------------------------------------------------------------------
// 3-D layer normalization. Means and variances need sum all-reduces along
// the axis that partitions the hidden dimension; gamma/beta then apply as
// the diagonal matrix-vector multiply and add. Directions are unaffected.

template <typename T>
struct LayerNormParams {
  DiagonalVector<T> gamma;
  DiagonalVector<T> beta;
  T eps = T(1e-5);
};

template <typename T>
struct LayerNormSaved {
  Matrix<T> x_hat;
  std::vector<T> inv_std;      // per local row
  std::vector<T> gamma_block;  // expanded column block of gamma
};

template <typename T>
struct LayerNormGrads {
  Activation3D<T> dx;
  DiagonalVector<T> dgamma;
  DiagonalVector<T> dbeta;
};

template <typename T>
Activation3D<T> layernorm3d_fwd(Endpoint<T>& ep, const Activation3D<T>& x,
                                const LayerNormParams<T>& params,
                                LayerNormSaved<T>* saved = nullptr) {
  x.check_shape();
  if (params.gamma.global_len != x.hidden || params.beta.global_len != x.hidden)
    throw ShapeMismatch("layer norm parameter length does not match hidden size");
  const DirectionTriple d = triple_for_group(x.group);
  const std::size_t rows = x.local.rows, cols = x.local.cols;
  const T inv_h = T(1) / static_cast<T>(x.hidden);

  std::vector<T> sums(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) sums[r] += x.local(r, c);
  sums = ep.all_reduce(d.output, std::span<const T>(sums), ReduceOp::sum);
  std::vector<T> mean(rows);
  for (std::size_t r = 0; r < rows; ++r) mean[r] = sums[r] * inv_h;

  std::vector<T> sq(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const T dlt = x.local(r, c) - mean[r];
      sq[r] += dlt * dlt;
    }
  sq = ep.all_reduce(d.output, std::span<const T>(sq), ReduceOp::sum);
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r)
    inv_std[r] = T(1) / std::sqrt(sq[r] * inv_h + params.eps);

  std::vector<T> gamma_block = detail::expand_diagonal(ep, d, x.owner, params.gamma);
  std::vector<T> beta_block = detail::expand_diagonal(ep, d, x.owner, params.beta);

  Activation3D<T> y = x;
  Matrix<T> x_hat(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      x_hat(r, c) = (x.local(r, c) - mean[r]) * inv_std[r];
      y.local(r, c) = gamma_block[c] * x_hat(r, c) + beta_block[c];
    }
  if (saved) {
    saved->x_hat = std::move(x_hat);
    saved->inv_std = std::move(inv_std);
    saved->gamma_block = std::move(gamma_block);
  }
  return y;
}

template <typename T>
LayerNormGrads<T> layernorm3d_bwd(Endpoint<T>& ep, const Activation3D<T>& dy,
                                  const LayerNormSaved<T>& saved) {
  dy.check_shape();
  const DirectionTriple d = triple_for_group(dy.group);
  const std::size_t rows = dy.local.rows, cols = dy.local.cols;
  const T inv_h = T(1) / static_cast<T>(dy.hidden);

  std::vector<T> dbeta_cols(cols, T(0)), dgamma_cols(cols, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      dbeta_cols[c] += dy.local(r, c);
      dgamma_cols[c] += dy.local(r, c) * saved.x_hat(r, c);
    }

  Matrix<T> dx_hat(rows, cols);
  std::vector<T> row_sum(rows, T(0)), row_dot(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      dx_hat(r, c) = dy.local(r, c) * saved.gamma_block[c];
      row_sum[r] += dx_hat(r, c);
      row_dot[r] += dx_hat(r, c) * saved.x_hat(r, c);
    }
  row_sum = ep.all_reduce(d.output, std::span<const T>(row_sum), ReduceOp::sum);
  row_dot = ep.all_reduce(d.output, std::span<const T>(row_dot), ReduceOp::sum);

  LayerNormGrads<T> g;
  g.dx = dy;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      g.dx.local(r, c) = saved.inv_std[r] * (dx_hat(r, c) - row_sum[r] * inv_h -
                                             saved.x_hat(r, c) * row_dot[r] * inv_h);
  g.dgamma = detail::reduce_to_diagonal(ep, d, dy.owner, dy.hidden, std::move(dgamma_cols));
  g.dbeta = detail::reduce_to_diagonal(ep, d, dy.owner, dy.hidden, std::move(dbeta_cols));
  return g;
}

}  // namespace cube3d
