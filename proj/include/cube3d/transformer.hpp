// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cube3d/attention.hpp"
#include "cube3d/matrix_io.hpp"
#include "cube3d/nn.hpp"
#include "cube3d/rng.hpp"

namespace cube3d {

// ---------------------------------------------------------------------------
// MLP block: linear (h -> 4h), GELU, linear (4h -> h). The GELU is
// elementwise and therefore perfectly balanced; the two linear layers
// leave the group index where it was.

template <typename T>
struct MlpParams {
  LinearParams<T> fc1;  // (h x 4h), input group g
  LinearParams<T> fc2;  // (4h x h), input group 1-g
};

template <typename T>
struct MlpSaved {
  LinearSaved<T> fc1_lin;
  LinearSaved<T> fc2_lin;
  Matrix<T> pre_act;  // fc1 output before GELU
};

template <typename T>
struct MlpGrads {
  Activation3D<T> dx;
  ShardedMatrix<T> dw1;
  DiagonalVector<T> db1;
  ShardedMatrix<T> dw2;
  DiagonalVector<T> db2;
};

template <typename T>
Activation3D<T> mlp_fwd(Endpoint<T>& ep, const Activation3D<T>& x, const MlpParams<T>& params,
                        GroupState& gs, MlpSaved<T>* saved = nullptr) {
  MlpSaved<T> local_saved;
  MlpSaved<T>& sv = saved ? *saved : local_saved;
  Activation3D<T> h1 = linear3d_fwd(ep, x, params.fc1, gs, &sv.fc1_lin);
  sv.pre_act = h1.local;
  for (auto& v : h1.local.data) v = gelu(v);
  return linear3d_fwd(ep, h1, params.fc2, gs, &sv.fc2_lin);
}

template <typename T>
MlpGrads<T> mlp_bwd(Endpoint<T>& ep, const Activation3D<T>& dy, const MlpSaved<T>& saved,
                    const MlpParams<T>& params) {
  LinearGrads<T> fc2_g = linear3d_bwd(ep, dy, saved.fc2_lin, params.fc2);
  Activation3D<T>& dh1 = fc2_g.dx;
  for (std::size_t t = 0; t < dh1.local.data.size(); ++t)
    dh1.local.data[t] *= gelu_grad(saved.pre_act.data[t]);
  LinearGrads<T> fc1_g = linear3d_bwd(ep, dh1, saved.fc1_lin, params.fc1);
  MlpGrads<T> g;
  g.dx = std::move(fc1_g.dx);
  g.dw1 = std::move(fc1_g.dweight);
  g.db1 = std::move(fc1_g.dbias);
  g.dw2 = std::move(fc2_g.dweight);
  g.db2 = std::move(fc2_g.dbias);
  return g;
}

// ---------------------------------------------------------------------------
// Full Transformer layer with pre-norm residual wiring:
//   y1 = x + Attn(LN1(x));  y = y1 + MLP(LN2(y1)).
// Attention and MLP each preserve the group index, so the layer does too
// and stacked layers compose without re-sharding.

template <typename T>
struct LayerParams {
  LayerNormParams<T> ln1;
  AttentionParams<T> attn;
  LayerNormParams<T> ln2;
  MlpParams<T> mlp;
};

template <typename T>
struct LayerSaved {
  LayerNormSaved<T> ln1;
  AttentionSaved<T> attn;
  LayerNormSaved<T> ln2;
  MlpSaved<T> mlp;
};

template <typename T>
struct LayerGrads {
  Activation3D<T> dx;
  DiagonalVector<T> dln1_gamma, dln1_beta;
  AttentionGrads<T> attn;
  DiagonalVector<T> dln2_gamma, dln2_beta;
  MlpGrads<T> mlp;
};

namespace detail {

template <typename T>
void add_into(Activation3D<T>& acc, const Activation3D<T>& other) {
  if (acc.group != other.group || !acc.local.same_shape(other.local))
    throw ShapeMismatch("residual operands disagree in shape or group");
  for (std::size_t t = 0; t < acc.local.data.size(); ++t)
    acc.local.data[t] += other.local.data[t];
}

}  // namespace detail

template <typename T>
Activation3D<T> transformer_layer_fwd(Endpoint<T>& ep, const Activation3D<T>& x,
                                      const LayerParams<T>& params, const TransformerConfig& cfg,
                                      GroupState& gs, LayerSaved<T>* saved = nullptr) {
  LayerSaved<T> local_saved;
  LayerSaved<T>& sv = saved ? *saved : local_saved;
  Activation3D<T> n1 = layernorm3d_fwd(ep, x, params.ln1, &sv.ln1);
  Activation3D<T> y1 = attention_fwd(ep, n1, params.attn, cfg, gs, &sv.attn);
  detail::add_into(y1, x);
  Activation3D<T> n2 = layernorm3d_fwd(ep, y1, params.ln2, &sv.ln2);
  Activation3D<T> y = mlp_fwd(ep, n2, params.mlp, gs, &sv.mlp);
  detail::add_into(y, y1);
  return y;
}

template <typename T>
LayerGrads<T> transformer_layer_bwd(Endpoint<T>& ep, const Activation3D<T>& dy,
                                    const LayerSaved<T>& saved, const LayerParams<T>& params,
                                    const TransformerConfig& cfg) {
  LayerGrads<T> g;
  g.mlp = mlp_bwd(ep, dy, saved.mlp, params.mlp);
  LayerNormGrads<T> ln2_g = layernorm3d_bwd(ep, g.mlp.dx, saved.ln2);
  g.dln2_gamma = std::move(ln2_g.dgamma);
  g.dln2_beta = std::move(ln2_g.dbeta);
  Activation3D<T> dy1 = dy;
  detail::add_into(dy1, ln2_g.dx);
  g.attn = attention_bwd(ep, dy1, saved.attn, params.attn, cfg);
  LayerNormGrads<T> ln1_g = layernorm3d_bwd(ep, g.attn.dx, saved.ln1);
  g.dln1_gamma = std::move(ln1_g.dgamma);
  g.dln1_beta = std::move(ln1_g.dbeta);
  g.dx = std::move(dy1);
  detail::add_into(g.dx, ln1_g.dx);
  return g;
}

template <typename T>
Activation3D<T> transformer_stack_fwd(Endpoint<T>& ep, const Activation3D<T>& x,
                                      const std::vector<LayerParams<T>>& layers,
                                      const TransformerConfig& cfg, GroupState& gs,
                                      std::vector<LayerSaved<T>>* saved = nullptr) {
  Activation3D<T> cur = x;
  if (saved) saved->resize(layers.size());
  for (std::size_t li = 0; li < layers.size(); ++li)
    cur = transformer_layer_fwd(ep, cur, layers[li], cfg, gs, saved ? &(*saved)[li] : nullptr);
  return cur;
}

template <typename T>
std::vector<LayerGrads<T>> transformer_stack_bwd(Endpoint<T>& ep, const Activation3D<T>& dy,
                                                 const std::vector<LayerSaved<T>>& saved,
                                                 const std::vector<LayerParams<T>>& layers,
                                                 const TransformerConfig& cfg,
                                                 Activation3D<T>* dx = nullptr) {
  std::vector<LayerGrads<T>> grads(layers.size());
  Activation3D<T> cur = dy;
  for (std::size_t li = layers.size(); li-- > 0;) {
    grads[li] = transformer_layer_bwd(ep, cur, saved[li], layers[li], cfg);
    cur = grads[li].dx;
  }
  if (dx) *dx = std::move(cur);
  return grads;
}

// ---------------------------------------------------------------------------
// Global-form parameters: what the serial reference consumes, what the
// fixed-seed initializer produces, and what gets partitioned onto ranks.

template <typename T>
struct GlobalLayerParams {
  std::vector<T> ln1_gamma, ln1_beta;
  Matrix<T> w_qkv;  // (h x 3h), columns ordered [head][q|k|v][dim]
  std::vector<T> b_qkv;
  Matrix<T> w_out;  // (h x h)
  std::vector<T> b_out;
  std::vector<T> ln2_gamma, ln2_beta;
  Matrix<T> w_fc1;  // (h x 4h)
  std::vector<T> b_fc1;
  Matrix<T> w_fc2;  // (4h x h)
  std::vector<T> b_fc2;
};

/// Fixed-seed uniform [-0.1, 0.1] initialization; gammas sit at 1 plus the
/// same jitter. Reproducibility only, never correctness.
template <typename T>
GlobalLayerParams<T> init_layer_params(const TransformerConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t h = cfg.hidden;
  GlobalLayerParams<T> g;
  g.ln1_gamma = random_vector<T>(h, rng, -0.1, 0.1);
  for (auto& v : g.ln1_gamma) v += T(1);
  g.ln1_beta = random_vector<T>(h, rng, -0.1, 0.1);
  g.w_qkv = random_matrix<T>(h, 3 * h, rng, -0.1, 0.1);
  g.b_qkv = random_vector<T>(3 * h, rng, -0.1, 0.1);
  g.w_out = random_matrix<T>(h, h, rng, -0.1, 0.1);
  g.b_out = random_vector<T>(h, rng, -0.1, 0.1);
  g.ln2_gamma = random_vector<T>(h, rng, -0.1, 0.1);
  for (auto& v : g.ln2_gamma) v += T(1);
  g.ln2_beta = random_vector<T>(h, rng, -0.1, 0.1);
  g.w_fc1 = random_matrix<T>(h, 4 * h, rng, -0.1, 0.1);
  g.b_fc1 = random_vector<T>(4 * h, rng, -0.1, 0.1);
  g.w_fc2 = random_matrix<T>(4 * h, h, rng, -0.1, 0.1);
  g.b_fc2 = random_vector<T>(h, rng, -0.1, 0.1);
  return g;
}

/// Partitions global parameters for a layer whose input arrives in
/// `input_group`. First linears of each block take the input triple, the
/// second ones the swapped triple; vectors go to their diagonal ranks.
template <typename T>
std::vector<LayerParams<T>> partition_layer_params(const GlobalLayerParams<T>& g,
                                                   const TransformerConfig& cfg,
                                                   const CubeTopology& topo, int input_group) {
  cfg.validate();
  const DirectionTriple d_in = triple_for_group(input_group);
  const DirectionTriple d_swap = triple_for_group(1 - input_group);
  auto w_qkv = partition(g.w_qkv, Layout::Weight, topo, d_in);
  auto b_qkv = partition_diagonal(g.b_qkv, topo);
  auto w_out = partition(g.w_out, Layout::Weight, topo, d_swap);
  auto b_out = partition_diagonal(g.b_out, topo);
  auto w_fc1 = partition(g.w_fc1, Layout::Weight, topo, d_in);
  auto b_fc1 = partition_diagonal(g.b_fc1, topo);
  auto w_fc2 = partition(g.w_fc2, Layout::Weight, topo, d_swap);
  auto b_fc2 = partition_diagonal(g.b_fc2, topo);
  auto ln1_gamma = partition_diagonal(g.ln1_gamma, topo);
  auto ln1_beta = partition_diagonal(g.ln1_beta, topo);
  auto ln2_gamma = partition_diagonal(g.ln2_gamma, topo);
  auto ln2_beta = partition_diagonal(g.ln2_beta, topo);

  std::vector<LayerParams<T>> out(topo.size());
  for (int r = 0; r < topo.size(); ++r) {
    LayerParams<T>& lp = out[r];
    lp.ln1 = {ln1_gamma[r], ln1_beta[r], static_cast<T>(cfg.eps)};
    lp.attn.qkv = {w_qkv[r], b_qkv[r], input_group};
    lp.attn.out = {w_out[r], b_out[r], 1 - input_group};
    lp.ln2 = {ln2_gamma[r], ln2_beta[r], static_cast<T>(cfg.eps)};
    lp.mlp.fc1 = {w_fc1[r], b_fc1[r], input_group};
    lp.mlp.fc2 = {w_fc2[r], b_fc2[r], 1 - input_group};
  }
  return out;
}

/// Writes each global parameter as one binary matrix file under `prefix`
/// (vectors as 1 x N matrices); load_layer_params reads them back.
/// Partitioning happens on load, per the layer's input group.
template <typename T>
void save_layer_params(const GlobalLayerParams<T>& g, const std::string& prefix) {
  auto vec_as_matrix = [](const std::vector<T>& v) { return Matrix<T>(1, v.size(), v); };
  write_matrix_file(prefix + ".ln1_gamma.bin", vec_as_matrix(g.ln1_gamma));
  write_matrix_file(prefix + ".ln1_beta.bin", vec_as_matrix(g.ln1_beta));
  write_matrix_file(prefix + ".w_qkv.bin", g.w_qkv);
  write_matrix_file(prefix + ".b_qkv.bin", vec_as_matrix(g.b_qkv));
  write_matrix_file(prefix + ".w_out.bin", g.w_out);
  write_matrix_file(prefix + ".b_out.bin", vec_as_matrix(g.b_out));
  write_matrix_file(prefix + ".ln2_gamma.bin", vec_as_matrix(g.ln2_gamma));
  write_matrix_file(prefix + ".ln2_beta.bin", vec_as_matrix(g.ln2_beta));
  write_matrix_file(prefix + ".w_fc1.bin", g.w_fc1);
  write_matrix_file(prefix + ".b_fc1.bin", vec_as_matrix(g.b_fc1));
  write_matrix_file(prefix + ".w_fc2.bin", g.w_fc2);
  write_matrix_file(prefix + ".b_fc2.bin", vec_as_matrix(g.b_fc2));
}

template <typename T>
GlobalLayerParams<T> load_layer_params(const std::string& prefix) {
  auto vec = [](Matrix<T> m) { return std::move(m.data); };
  GlobalLayerParams<T> g;
  g.ln1_gamma = vec(read_matrix_file<T>(prefix + ".ln1_gamma.bin"));
  g.ln1_beta = vec(read_matrix_file<T>(prefix + ".ln1_beta.bin"));
  g.w_qkv = read_matrix_file<T>(prefix + ".w_qkv.bin");
  g.b_qkv = vec(read_matrix_file<T>(prefix + ".b_qkv.bin"));
  g.w_out = read_matrix_file<T>(prefix + ".w_out.bin");
  g.b_out = vec(read_matrix_file<T>(prefix + ".b_out.bin"));
  g.ln2_gamma = vec(read_matrix_file<T>(prefix + ".ln2_gamma.bin"));
  g.ln2_beta = vec(read_matrix_file<T>(prefix + ".ln2_beta.bin"));
  g.w_fc1 = read_matrix_file<T>(prefix + ".w_fc1.bin");
  g.b_fc1 = vec(read_matrix_file<T>(prefix + ".b_fc1.bin"));
  g.w_fc2 = read_matrix_file<T>(prefix + ".w_fc2.bin");
  g.b_fc2 = vec(read_matrix_file<T>(prefix + ".b_fc2.bin"));
  return g;
}

}  // namespace cube3d
