// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "cube3d/matrix.hpp"
#include "cube3d/nn.hpp"
#include "cube3d/transformer.hpp"

namespace cube3d {

// Single-process references the parallel path is checked against. They
// work on global matrices, never touch the transport or the sharding
// machinery, and keep contraction order ascending with one accumulator
// per element so the p=1 cube agrees bitwise.

enum class MatmulForm { AB, ABt, AtB };

template <typename T>
Matrix<T> serial_matmul(const Matrix<T>& a, const Matrix<T>& b, MatmulForm form) {
  std::size_t m = 0, n = 0, inner = 0;
  switch (form) {
    case MatmulForm::AB:
      if (a.cols != b.rows) throw ShapeMismatch("serial AB: A cols != B rows");
      m = a.rows; inner = a.cols; n = b.cols;
      break;
    case MatmulForm::ABt:
      if (a.cols != b.cols) throw ShapeMismatch("serial AB^T: A cols != B cols");
      m = a.rows; inner = a.cols; n = b.rows;
      break;
    case MatmulForm::AtB:
      if (a.rows != b.rows) throw ShapeMismatch("serial A^TB: A rows != B rows");
      m = a.cols; inner = a.rows; n = b.cols;
      break;
  }
  Matrix<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < inner; ++k) {
        switch (form) {
          case MatmulForm::AB: acc += a(i, k) * b(k, j); break;
          case MatmulForm::ABt: acc += a(i, k) * b(j, k); break;
          case MatmulForm::AtB: acc += a(k, i) * b(k, j); break;
        }
      }
      c(i, j) = acc;
    }
  return c;
}

// ---------------------------------------------------------------------------
// Dense reference layers.

template <typename T>
struct RefLinearCache {
  Matrix<T> x;
};

template <typename T>
Matrix<T> ref_linear_fwd(const Matrix<T>& x, const Matrix<T>& w, const std::vector<T>& b,
                         RefLinearCache<T>* cache = nullptr) {
  Matrix<T> y = serial_matmul(x, w, MatmulForm::AB);
  for (std::size_t r = 0; r < y.rows; ++r)
    for (std::size_t c = 0; c < y.cols; ++c) y(r, c) += b[c];
  if (cache) cache->x = x;
  return y;
}

template <typename T>
struct RefLinearGrads {
  Matrix<T> dx;
  Matrix<T> dw;
  std::vector<T> db;
};

template <typename T>
RefLinearGrads<T> ref_linear_bwd(const Matrix<T>& dy, const RefLinearCache<T>& cache,
                                 const Matrix<T>& w) {
  RefLinearGrads<T> g;
  g.dx = serial_matmul(dy, w, MatmulForm::ABt);
  g.dw = serial_matmul(cache.x, dy, MatmulForm::AtB);
  g.db.assign(dy.cols, T(0));
  for (std::size_t r = 0; r < dy.rows; ++r)
    for (std::size_t c = 0; c < dy.cols; ++c) g.db[c] += dy(r, c);
  return g;
}

template <typename T>
struct RefLayerNormCache {
  Matrix<T> x_hat;
  std::vector<T> inv_std;
  std::vector<T> gamma;
};

template <typename T>
Matrix<T> ref_layernorm_fwd(const Matrix<T>& x, const std::vector<T>& gamma,
                            const std::vector<T>& beta, T eps,
                            RefLayerNormCache<T>* cache = nullptr) {
  const std::size_t rows = x.rows, cols = x.cols;
  const T inv_h = T(1) / static_cast<T>(cols);
  Matrix<T> y(rows, cols), x_hat(rows, cols);
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sum = T(0);
    for (std::size_t c = 0; c < cols; ++c) sum += x(r, c);
    const T mean = sum * inv_h;
    T sq = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = x(r, c) - mean;
      sq += d * d;
    }
    const T inv = T(1) / std::sqrt(sq * inv_h + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      x_hat(r, c) = (x(r, c) - mean) * inv;
      y(r, c) = gamma[c] * x_hat(r, c) + beta[c];
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->gamma = gamma;
  }
  return y;
}

template <typename T>
struct RefLayerNormGrads {
  Matrix<T> dx;
  std::vector<T> dgamma;
  std::vector<T> dbeta;
};

template <typename T>
RefLayerNormGrads<T> ref_layernorm_bwd(const Matrix<T>& dy, const RefLayerNormCache<T>& cache) {
  const std::size_t rows = dy.rows, cols = dy.cols;
  const T inv_h = T(1) / static_cast<T>(cols);
  RefLayerNormGrads<T> g;
  g.dx = Matrix<T>(rows, cols);
  g.dgamma.assign(cols, T(0));
  g.dbeta.assign(cols, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      g.dbeta[c] += dy(r, c);
      g.dgamma[c] += dy(r, c) * cache.x_hat(r, c);
    }
  for (std::size_t r = 0; r < rows; ++r) {
    T row_sum = T(0), row_dot = T(0);
    std::vector<T> dx_hat(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      dx_hat[c] = dy(r, c) * cache.gamma[c];
      row_sum += dx_hat[c];
      row_dot += dx_hat[c] * cache.x_hat(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c)
      g.dx(r, c) = cache.inv_std[r] *
                   (dx_hat[c] - row_sum * inv_h - cache.x_hat(r, c) * row_dot * inv_h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Reference attention / MLP / full layer. Parameter gradients reuse the
// GlobalLayerParams container, one gradient per parameter.

template <typename T>
struct RefAttentionCache {
  RefLinearCache<T> qkv_lin, out_lin;
  Matrix<T> qkv;                  // (b*s, 3h)
  std::vector<Matrix<T>> probs;   // per (batch, head): (s, s)
  Matrix<T> ctx;                  // (b*s, h)
};

template <typename T>
Matrix<T> ref_attention_fwd(const TransformerConfig& cfg, const Matrix<T>& x,
                            const GlobalLayerParams<T>& p, RefAttentionCache<T>* cache = nullptr) {
  RefAttentionCache<T> local;
  RefAttentionCache<T>& cv = cache ? *cache : local;
  const std::size_t s = cfg.seq, dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  cv.qkv = ref_linear_fwd(x, p.w_qkv, p.b_qkv, &cv.qkv_lin);
  cv.ctx = Matrix<T>(x.rows, cfg.hidden);
  cv.probs.assign(cfg.batch * cfg.heads, Matrix<T>{});
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t base = head * 3 * dh;
      Matrix<T> scores(s, s);
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t sj = 0; sj < s; ++sj) {
          T acc = T(0);
          for (std::size_t t = 0; t < dh; ++t)
            acc += cv.qkv(b * s + si, base + t) * cv.qkv(b * s + sj, base + dh + t);
          scores(si, sj) = acc;
        }
      for (auto& v : scores.data) v *= scale;
      for (std::size_t si = 0; si < s; ++si) {
        T m = scores(si, 0);
        for (std::size_t sj = 1; sj < s; ++sj) m = std::max(m, scores(si, sj));
        T sum = T(0);
        for (std::size_t sj = 0; sj < s; ++sj) {
          scores(si, sj) = std::exp(scores(si, sj) - m);
          sum += scores(si, sj);
        }
        for (std::size_t sj = 0; sj < s; ++sj) scores(si, sj) /= sum;
      }
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t t = 0; t < dh; ++t) {
          T acc = T(0);
          for (std::size_t sj = 0; sj < s; ++sj)
            acc += scores(si, sj) * cv.qkv(b * s + sj, base + 2 * dh + t);
          cv.ctx(b * s + si, head * dh + t) = acc;
        }
      cv.probs[b * cfg.heads + head] = std::move(scores);
    }
  }
  return ref_linear_fwd(cv.ctx, p.w_out, p.b_out, &cv.out_lin);
}

template <typename T>
struct RefAttentionGrads {
  Matrix<T> dx;
  Matrix<T> dw_qkv, dw_out;
  std::vector<T> db_qkv, db_out;
};

template <typename T>
RefAttentionGrads<T> ref_attention_bwd(const TransformerConfig& cfg, const Matrix<T>& dy,
                                       const RefAttentionCache<T>& cache,
                                       const GlobalLayerParams<T>& p) {
  const std::size_t s = cfg.seq, dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  RefLinearGrads<T> out_g = ref_linear_bwd(dy, cache.out_lin, p.w_out);
  Matrix<T> dqkv(dy.rows, 3 * cfg.hidden);
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const std::size_t base = head * 3 * dh;
      const Matrix<T>& probs = cache.probs[b * cfg.heads + head];
      Matrix<T> dprobs(s, s);
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t sj = 0; sj < s; ++sj) {
          T acc = T(0);
          for (std::size_t t = 0; t < dh; ++t)
            acc += out_g.dx(b * s + si, head * dh + t) * cache.qkv(b * s + sj, base + 2 * dh + t);
          dprobs(si, sj) = acc;
        }
      // dV += P^T dCtx
      for (std::size_t sj = 0; sj < s; ++sj)
        for (std::size_t t = 0; t < dh; ++t) {
          T acc = T(0);
          for (std::size_t si = 0; si < s; ++si)
            acc += probs(si, sj) * out_g.dx(b * s + si, head * dh + t);
          dqkv(b * s + sj, base + 2 * dh + t) = acc;
        }
      Matrix<T> dscores(s, s);
      for (std::size_t si = 0; si < s; ++si) {
        T row_dot = T(0);
        for (std::size_t sj = 0; sj < s; ++sj) row_dot += dprobs(si, sj) * probs(si, sj);
        for (std::size_t sj = 0; sj < s; ++sj)
          dscores(si, sj) = probs(si, sj) * (dprobs(si, sj) - row_dot) * scale;
      }
      // dQ = dS K, dK = dS^T Q
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t t = 0; t < dh; ++t) {
          T acc = T(0);
          for (std::size_t sj = 0; sj < s; ++sj)
            acc += dscores(si, sj) * cache.qkv(b * s + sj, base + dh + t);
          dqkv(b * s + si, base + t) = acc;
        }
      for (std::size_t sj = 0; sj < s; ++sj)
        for (std::size_t t = 0; t < dh; ++t) {
          T acc = T(0);
          for (std::size_t si = 0; si < s; ++si)
            acc += dscores(si, sj) * cache.qkv(b * s + si, base + t);
          dqkv(b * s + sj, base + dh + t) = acc;
        }
    }
  }
  RefLinearGrads<T> qkv_g = ref_linear_bwd(dqkv, cache.qkv_lin, p.w_qkv);
  RefAttentionGrads<T> g;
  g.dx = std::move(qkv_g.dx);
  g.dw_qkv = std::move(qkv_g.dw);
  g.db_qkv = std::move(qkv_g.db);
  g.dw_out = std::move(out_g.dw);
  g.db_out = std::move(out_g.db);
  return g;
}

template <typename T>
struct RefLayerCache {
  RefLayerNormCache<T> ln1, ln2;
  RefAttentionCache<T> attn;
  RefLinearCache<T> fc1_lin, fc2_lin;
  Matrix<T> pre_act;
};

template <typename T>
Matrix<T> ref_layer_fwd(const TransformerConfig& cfg, const Matrix<T>& x,
                        const GlobalLayerParams<T>& p, RefLayerCache<T>* cache = nullptr) {
  RefLayerCache<T> local;
  RefLayerCache<T>& cv = cache ? *cache : local;
  const T eps = static_cast<T>(cfg.eps);
  Matrix<T> n1 = ref_layernorm_fwd(x, p.ln1_gamma, p.ln1_beta, eps, &cv.ln1);
  Matrix<T> y1 = ref_attention_fwd(cfg, n1, p, &cv.attn);
  for (std::size_t t = 0; t < y1.data.size(); ++t) y1.data[t] += x.data[t];
  Matrix<T> n2 = ref_layernorm_fwd(y1, p.ln2_gamma, p.ln2_beta, eps, &cv.ln2);
  Matrix<T> h1 = ref_linear_fwd(n2, p.w_fc1, p.b_fc1, &cv.fc1_lin);
  cv.pre_act = h1;
  for (auto& v : h1.data) v = gelu(v);
  Matrix<T> y = ref_linear_fwd(h1, p.w_fc2, p.b_fc2, &cv.fc2_lin);
  for (std::size_t t = 0; t < y.data.size(); ++t) y.data[t] += y1.data[t];
  return y;
}

template <typename T>
struct RefLayerGrads {
  Matrix<T> dx;
  GlobalLayerParams<T> dparams;  // one gradient per parameter
};

template <typename T>
RefLayerGrads<T> ref_layer_bwd(const TransformerConfig& cfg, const Matrix<T>& dy,
                               const RefLayerCache<T>& cache, const GlobalLayerParams<T>& p) {
  RefLayerGrads<T> g;
  RefLinearGrads<T> fc2_g = ref_linear_bwd(dy, cache.fc2_lin, p.w_fc2);
  for (std::size_t t = 0; t < fc2_g.dx.data.size(); ++t)
    fc2_g.dx.data[t] *= gelu_grad(cache.pre_act.data[t]);
  RefLinearGrads<T> fc1_g = ref_linear_bwd(fc2_g.dx, cache.fc1_lin, p.w_fc1);
  RefLayerNormGrads<T> ln2_g = ref_layernorm_bwd(fc1_g.dx, cache.ln2);
  Matrix<T> dy1 = dy;
  for (std::size_t t = 0; t < dy1.data.size(); ++t) dy1.data[t] += ln2_g.dx.data[t];
  RefAttentionGrads<T> attn_g = ref_attention_bwd(cfg, dy1, cache.attn, p);
  RefLayerNormGrads<T> ln1_g = ref_layernorm_bwd(attn_g.dx, cache.ln1);
  g.dx = dy1;
  for (std::size_t t = 0; t < g.dx.data.size(); ++t) g.dx.data[t] += ln1_g.dx.data[t];
  g.dparams.ln1_gamma = std::move(ln1_g.dgamma);
  g.dparams.ln1_beta = std::move(ln1_g.dbeta);
  g.dparams.w_qkv = std::move(attn_g.dw_qkv);
  g.dparams.b_qkv = std::move(attn_g.db_qkv);
  g.dparams.w_out = std::move(attn_g.dw_out);
  g.dparams.b_out = std::move(attn_g.db_out);
  g.dparams.ln2_gamma = std::move(ln2_g.dgamma);
  g.dparams.ln2_beta = std::move(ln2_g.dbeta);
  g.dparams.w_fc1 = std::move(fc1_g.dw);
  g.dparams.b_fc1 = std::move(fc1_g.db);
  g.dparams.w_fc2 = std::move(fc2_g.dw);
  g.dparams.b_fc2 = std::move(fc2_g.db);
  return g;
}

/// Whole-stack reference: forward value plus reverse-mode gradients for
/// every layer and the input, for a given upstream gradient.
template <typename T>
struct RefStackResult {
  Matrix<T> y;
  Matrix<T> dx;
  std::vector<GlobalLayerParams<T>> dparams;
};

template <typename T>
RefStackResult<T> serial_transformer_reference(const TransformerConfig& cfg, const Matrix<T>& x,
                                               const std::vector<GlobalLayerParams<T>>& layers,
                                               const Matrix<T>& dy) {
  std::vector<RefLayerCache<T>> caches(layers.size());
  Matrix<T> cur = x;
  for (std::size_t li = 0; li < layers.size(); ++li)
    cur = ref_layer_fwd(cfg, cur, layers[li], &caches[li]);
  RefStackResult<T> out;
  out.y = std::move(cur);
  out.dparams.resize(layers.size());
  Matrix<T> grad = dy;
  for (std::size_t li = layers.size(); li-- > 0;) {
    RefLayerGrads<T> g = ref_layer_bwd(cfg, grad, caches[li], layers[li]);
    out.dparams[li] = std::move(g.dparams);
    grad = std::move(g.dx);
  }
  out.dx = std::move(grad);
  return out;
}

// ---------------------------------------------------------------------------
// Central finite differences: (L(t+h e) - L(t-h e)) / (2h) per element.

template <typename T, typename Loss>
std::vector<double> finite_diff(Loss&& loss, std::vector<T>& theta, double step) {
  if (step <= 0) throw ConfigInvalid("finite difference step must be positive");
  std::vector<double> grad(theta.size());
  for (std::size_t t = 0; t < theta.size(); ++t) {
    const T saved = theta[t];
    theta[t] = saved + static_cast<T>(step);
    const double up = loss();
    theta[t] = saved - static_cast<T>(step);
    const double down = loss();
    theta[t] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFinite("loss evaluated non-finite during finite differences");
    grad[t] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace cube3d
