// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cube3d/bench.hpp"
#include "cube3d/cost_model.hpp"
#include "cube3d/ops3d.hpp"
#include "cube3d/reference.hpp"
#include "cube3d/rng.hpp"
#include "cube3d/transformer.hpp"

namespace cube3d {

struct VerifyOptions {
  int p = 2;
  std::size_t batch = 2;
  std::size_t seq = 8;
  std::size_t heads = 2;
  std::size_t hidden = 16;
  std::size_t layers = 1;
  std::uint64_t seed = 7;
  Scheduler scheduler = Scheduler::threads;
  bool full_fd = false;  // finite-difference every parameter element

  TransformerConfig config() const {
    TransformerConfig cfg;
    cfg.batch = batch;
    cfg.seq = seq;
    cfg.heads = heads;
    cfg.hidden = hidden;
    cfg.p = p;
    cfg.layers = layers;
    cfg.eps = 1e-5;
    return cfg;
  }
};

// Shared drivers for the verify suite, the acceptance suite and the CLI.
namespace verify_detail {

template <typename T>
struct MatmulArtifacts {
  Matrix<T> c;
  Matrix<T> da;
  Matrix<T> db;
  std::vector<CostCounters> counters;
  DirectionTriple out_dirs;
  Layout out_layout = Layout::Output;
};

template <typename T>
MatmulArtifacts<T> run_matmul(int p, const Matrix<T>& a, const Matrix<T>& b,
                              const Matrix<T>& upstream, MatmulForm form, Scheduler sched) {
  CubeTopology topo(p);
  std::vector<ShardedMatrix<T>> fa, fb, fdc;
  switch (form) {
    case MatmulForm::AB:
      fa = partition(a, Layout::Input, topo);
      fb = partition(b, Layout::Weight, topo);
      fdc = partition(upstream, Layout::Output, topo);
      break;
    case MatmulForm::ABt:
      fa = partition(a, Layout::Input, topo);
      fb = partition(b, Layout::WeightOfTranspose, topo);
      fdc = partition(upstream, Layout::Output, topo);
      break;
    case MatmulForm::AtB:
      fa = partition(a, Layout::Input, topo);
      fb = partition(b, Layout::Input, topo, canonical_directions().swapped());
      fdc = partition(upstream, Layout::Weight, topo);
      break;
  }
  std::vector<ShardedMatrix<T>> fc(topo.size()), fda(topo.size()), fdb(topo.size());
  Transport<T> tr(topo, sched);
  run_spmd(tr, [&](Endpoint<T>& ep) {
    const int r = ep.rank();
    ShardedMatrix<T> c;
    MatmulGrads<T> g;
    switch (form) {
      case MatmulForm::AB:
        c = matmul_ab_fwd(ep, fa[r], fb[r]);
        g = matmul_ab_bwd(ep, fdc[r], fa[r], fb[r]);
        break;
      case MatmulForm::ABt:
        c = matmul_abt_fwd(ep, fa[r], fb[r]);
        g = matmul_abt_bwd(ep, fdc[r], fa[r], fb[r]);
        break;
      case MatmulForm::AtB:
        c = matmul_atb_fwd(ep, fa[r], fb[r]);
        g = matmul_atb_bwd(ep, fdc[r], fa[r], fb[r]);
        break;
    }
    fc[r] = std::move(c);
    fda[r] = std::move(g.da);
    fdb[r] = std::move(g.db);
  });
  MatmulArtifacts<T> out;
  out.out_dirs = fc[0].dirs;
  out.out_layout = fc[0].layout;
  out.c = collect(fc);
  out.da = collect(fda);
  out.db = collect(fdb);
  for (int r = 0; r < topo.size(); ++r) out.counters.push_back(tr.counters(r));
  return out;
}

template <typename T>
Matrix<T> serial_grad_a(const Matrix<T>& g, const Matrix<T>& b, MatmulForm form) {
  switch (form) {
    case MatmulForm::AB: return serial_matmul(g, b, MatmulForm::ABt);
    case MatmulForm::ABt: return serial_matmul(g, b, MatmulForm::AB);
    case MatmulForm::AtB: return serial_matmul(b, g, MatmulForm::ABt);
  }
  return {};
}

template <typename T>
Matrix<T> serial_grad_b(const Matrix<T>& g, const Matrix<T>& a, MatmulForm form) {
  switch (form) {
    case MatmulForm::AB: return serial_matmul(a, g, MatmulForm::AtB);
    case MatmulForm::ABt: return serial_matmul(g, a, MatmulForm::AtB);
    case MatmulForm::AtB: return serial_matmul(a, g, MatmulForm::AB);
  }
  return {};
}

template <typename T>
struct VecArtifacts {
  Matrix<T> c;
  Matrix<T> da;
  std::vector<T> db;
};

template <typename T>
VecArtifacts<T> run_vec(int p, const Matrix<T>& a, const std::vector<T>& b,
                        const Matrix<T>& upstream, bool multiply_form, Scheduler sched) {
  CubeTopology topo(p);
  auto fa = partition(a, Layout::Input, topo);
  auto fvec = partition_diagonal(b, topo);
  auto fdc = partition(upstream, Layout::Input, topo);
  std::vector<ShardedMatrix<T>> fc(topo.size()), fda(topo.size());
  std::vector<DiagonalVector<T>> fdb(topo.size());
  Transport<T> tr(topo, sched);
  run_spmd(tr, [&](Endpoint<T>& ep) {
    const int r = ep.rank();
    if (multiply_form) {
      MulVecResult<T> res = mul_vec_fwd(ep, fa[r], fvec[r]);
      fc[r] = res.value;
      VecGrads<T> g = mul_vec_bwd(ep, fdc[r], res);
      fda[r] = std::move(g.da);
      fdb[r] = std::move(g.db);
    } else {
      fc[r] = add_vec_fwd(ep, fa[r], fvec[r]);
      VecGrads<T> g = add_vec_bwd(ep, fdc[r]);
      fda[r] = std::move(g.da);
      fdb[r] = std::move(g.db);
    }
  });
  return {collect(fc), collect(fda), collect_diagonal(fdb)};
}

template <typename T>
struct LayerArtifacts {
  Matrix<T> y;
  Matrix<T> dx;
  GlobalLayerParams<T> dparams;
  std::vector<CostCounters> counters;
  std::vector<std::size_t> boundary_sizes;
  int group_after = -1;
};

template <typename T>
LayerArtifacts<T> run_layer(const TransformerConfig& cfg, const GlobalLayerParams<T>& gp,
                            const Matrix<T>& x, const Matrix<T>& dy, Scheduler sched) {
  CubeTopology topo(cfg.p);
  auto params = partition_layer_params(gp, cfg, topo, 0);
  auto xs = activation_from_global(x, cfg.batch, cfg.seq, 0, topo);
  auto dys = activation_from_global(dy, cfg.batch, cfg.seq, 0, topo);
  std::vector<Activation3D<T>> ys(topo.size()), dxs(topo.size());
  std::vector<LayerGrads<T>> grads(topo.size());
  std::vector<std::size_t> sizes(topo.size());
  std::vector<int> group_after(topo.size());
  Transport<T> tr(topo, sched);
  run_spmd(tr, [&](Endpoint<T>& ep) {
    const int r = ep.rank();
    GroupState gs{0};
    LayerSaved<T> saved;
    ys[r] = transformer_layer_fwd(ep, xs[r], params[r], cfg, gs, &saved);
    group_after[r] = gs.input_group;
    sizes[r] = ys[r].local.size();
    grads[r] = transformer_layer_bwd(ep, dys[r], saved, params[r], cfg);
    dxs[r] = grads[r].dx;
  });
  LayerArtifacts<T> out;
  out.y = activation_to_global(ys);
  out.dx = activation_to_global(dxs);
  out.group_after = group_after[0];
  out.boundary_sizes = std::move(sizes);
  for (int r = 0; r < topo.size(); ++r) out.counters.push_back(tr.counters(r));
  auto collect_w = [&](auto member) {
    std::vector<ShardedMatrix<T>> f;
    for (int r = 0; r < topo.size(); ++r) f.push_back(member(grads[r]));
    return collect(f);
  };
  auto collect_d = [&](auto member) {
    std::vector<DiagonalVector<T>> f;
    for (int r = 0; r < topo.size(); ++r) f.push_back(member(grads[r]));
    return collect_diagonal(f);
  };
  out.dparams.w_qkv = collect_w([](LayerGrads<T>& g) { return g.attn.dw_qkv; });
  out.dparams.b_qkv = collect_d([](LayerGrads<T>& g) { return g.attn.db_qkv; });
  out.dparams.w_out = collect_w([](LayerGrads<T>& g) { return g.attn.dw_out; });
  out.dparams.b_out = collect_d([](LayerGrads<T>& g) { return g.attn.db_out; });
  out.dparams.w_fc1 = collect_w([](LayerGrads<T>& g) { return g.mlp.dw1; });
  out.dparams.b_fc1 = collect_d([](LayerGrads<T>& g) { return g.mlp.db1; });
  out.dparams.w_fc2 = collect_w([](LayerGrads<T>& g) { return g.mlp.dw2; });
  out.dparams.b_fc2 = collect_d([](LayerGrads<T>& g) { return g.mlp.db2; });
  out.dparams.ln1_gamma = collect_d([](LayerGrads<T>& g) { return g.dln1_gamma; });
  out.dparams.ln1_beta = collect_d([](LayerGrads<T>& g) { return g.dln1_beta; });
  out.dparams.ln2_gamma = collect_d([](LayerGrads<T>& g) { return g.dln2_gamma; });
  out.dparams.ln2_beta = collect_d([](LayerGrads<T>& g) { return g.dln2_beta; });
  return out;
}

template <typename T>
struct StackArtifacts {
  Matrix<T> y;
  Matrix<T> dx;
  int group_after = -1;
};

template <typename T>
StackArtifacts<T> run_stack(const TransformerConfig& cfg,
                            const std::vector<GlobalLayerParams<T>>& gps, const Matrix<T>& x,
                            const Matrix<T>& dy, Scheduler sched) {
  CubeTopology topo(cfg.p);
  std::vector<std::vector<LayerParams<T>>> params;
  for (const auto& gp : gps) params.push_back(partition_layer_params(gp, cfg, topo, 0));
  auto xs = activation_from_global(x, cfg.batch, cfg.seq, 0, topo);
  auto dys = activation_from_global(dy, cfg.batch, cfg.seq, 0, topo);
  std::vector<Activation3D<T>> ys(topo.size()), dxs(topo.size());
  std::vector<int> group_after(topo.size());
  Transport<T> tr(topo, sched);
  run_spmd(tr, [&](Endpoint<T>& ep) {
    const int r = ep.rank();
    GroupState gs{0};
    std::vector<LayerParams<T>> layers;
    for (const auto& f : params) layers.push_back(f[r]);
    std::vector<LayerSaved<T>> saved;
    ys[r] = transformer_stack_fwd(ep, xs[r], layers, cfg, gs, &saved);
    group_after[r] = gs.input_group;
    Activation3D<T> dx;
    transformer_stack_bwd(ep, dys[r], saved, layers, cfg, &dx);
    dxs[r] = dx;
  });
  return {activation_to_global(ys), activation_to_global(dxs), group_after[0]};
}

template <typename T>
double rel_err(const Matrix<T>& got, const Matrix<T>& want) {
  if (!got.same_shape(want)) return 1e300;
  double worst = 0;
  for (std::size_t t = 0; t < want.data.size(); ++t) {
    const double denom = std::max(1.0, std::abs(static_cast<double>(want.data[t])));
    worst = std::max(worst, std::abs(static_cast<double>(got.data[t]) -
                                     static_cast<double>(want.data[t])) /
                                denom);
  }
  return worst;
}

template <typename T>
double rel_err(const std::vector<T>& got, const std::vector<T>& want) {
  Matrix<T> g(1, got.size(), got), w(1, want.size(), want);
  return rel_err(g, w);
}

/// Deterministic index subsample for finite differences on larger runs.
inline std::vector<std::size_t> fd_indices(std::size_t n, bool full) {
  std::vector<std::size_t> idx;
  if (full || n <= 24) {
    for (std::size_t t = 0; t < n; ++t) idx.push_back(t);
  } else {
    const std::size_t stride = n / 24;
    for (std::size_t t = 0; t < n; t += stride) idx.push_back(t);
  }
  return idx;
}

}  // namespace verify_detail

/// Runs the whole property suite at the given configuration, printing one
/// PASS/FAIL line per check. Returns true iff everything passed. The
/// report depends only on the options (and dtype), never on scheduling,
/// which is what the determinism criterion checks.
template <typename T>
bool run_verify(const VerifyOptions& opts, std::ostream& os) {
  using namespace verify_detail;
  const TransformerConfig cfg = opts.config();
  cfg.validate();
  const bool f64 = std::is_same_v<T, double>;
  const double tol_oracle = f64 ? 1e-12 : 1e-3;
  const double tol_layer = f64 ? 1e-10 : 1e-3;
  const double tol_stack = f64 ? 1e-9 : 1e-3;
  const Scheduler sched = opts.scheduler;
  const int p = opts.p;
  const std::size_t np = static_cast<std::size_t>(p) * p * 2;  // matmul test size

  os << "cube3d verify: p=" << p << " ranks=" << p * p * p << " batch=" << opts.batch
     << " seq=" << opts.seq << " heads=" << opts.heads << " hidden=" << opts.hidden
     << " layers=" << opts.layers << " seed=" << opts.seed << " dtype=" << (f64 ? "f64" : "f32")
     << "\n";

  int passed = 0, total = 0;
  auto check = [&](const std::string& name, std::function<std::string()> body) {
    ++total;
    std::string detail;
    try {
      detail = body();
    } catch (const std::exception& e) {
      detail = e.what();
    }
    if (detail.empty()) {
      ++passed;
      os << "PASS " << name << "\n";
    } else {
      os << "FAIL " << name << ": " << detail << "\n";
    }
  };
  auto expect = [](bool ok, const std::string& msg) { return ok ? std::string{} : msg; };

  Rng seeds(opts.seed);
  const std::uint64_t s1 = seeds.next_u64(), s2 = seeds.next_u64(), s3 = seeds.next_u64(),
                      s4 = seeds.next_u64(), s5 = seeds.next_u64();

  check("topology-invariants", [&] {
    CubeTopology topo(p);
    for (int r = 0; r < topo.size(); ++r)
      if (topo.rank_of(topo.coords_of(r)) != r) return std::string("rank bijection broken");
    for (Axis axis : kAllAxes) {
      std::vector<int> seen(topo.size(), 0);
      for (int r = 0; r < topo.size(); ++r) {
        AxisGroup g = topo.axis_group(topo.coords_of(r), axis);
        if (g.size() != p) return std::string("group size != p");
        if (g.members[g.my_position] != r) return std::string("my_position wrong");
        ++seen[r];
      }
      for (int s : seen)
        if (s != 1) return std::string("rank not in exactly one group per axis");
    }
    return std::string{};
  });

  check("collective-semantics", [&] {
    CubeTopology topo(p);
    Transport<T> tr(topo, sched);
    std::string err;
    run_spmd(tr, [&](Endpoint<T>& ep) {
      Rng rng(s1 + ep.rank());
      std::vector<T> mine = random_vector<T>(static_cast<std::size_t>(2 * p), rng);
      std::vector<T> full = ep.all_gather(Axis::y, mine);
      // gathered slice at my position equals my shard
      const int pos = ep.coords().j;
      for (std::size_t t = 0; t < mine.size(); ++t)
        if (full[pos * mine.size() + t] != mine[t]) err = "all_gather misplaced shard";
      std::vector<T> reduced = ep.all_reduce(Axis::z, mine, ReduceOp::sum);
      std::vector<T> gathered = ep.all_gather(Axis::z, mine);
      for (std::size_t t = 0; t < mine.size(); ++t) {
        T acc = T(0);
        for (int q = 0; q < p; ++q) acc += gathered[q * mine.size() + t];
        if (acc != reduced[t]) err = "all_reduce != gather+ascending sum";
      }
      std::vector<T> contrib = ep.coords().i == 0 ? full : std::vector<T>(full.size(), T(0));
      std::vector<T> back = ep.reduce_scatter(Axis::x, contrib);
      // self-inverse pairing only holds when the gather axis matches; here
      // it spots gross slicing errors
      if (back.size() * p != full.size()) err = "reduce_scatter slice size wrong";
    });
    CostCounters tot = tr.total_counters();
    if (tot.elements_sent != tot.elements_received) return std::string("global sent != received");
    return err;
  });

  check("scheduler-determinism", [&] {
    auto program = [&](Transport<T>& tr, std::vector<std::vector<T>>& out) {
      run_spmd(tr, [&](Endpoint<T>& ep) {
        Rng rng(s2 + ep.rank());
        std::vector<T> v = random_vector<T>(8, rng);
        v = ep.all_gather(Axis::y, v);
        v = ep.reduce_scatter(Axis::z, v);
        v = ep.all_reduce(Axis::x, v, ReduceOp::sum);
        out[ep.rank()] = v;
      });
    };
    std::vector<std::vector<T>> a(p * p * p), b(p * p * p);
    Transport<T> t1(CubeTopology(p), Scheduler::threads);
    program(t1, a);
    Transport<T> t2(CubeTopology(p), Scheduler::lockstep);
    program(t2, b);
    return expect(a == b, "threads and lockstep disagree");
  });

  check("sharding-roundtrip", [&] {
    CubeTopology topo(p);
    Rng rng(s3);
    Matrix<T> m = random_matrix<T>(np, np, rng);
    for (Layout l : {Layout::Input, Layout::Weight, Layout::Output, Layout::WeightOfTranspose})
      if (!(collect(partition(m, l, topo)) == m)) return std::string("collect(partition) != id");
    std::vector<T> v = random_vector<T>(np, rng);
    if (collect_diagonal(partition_diagonal(v, topo)) != v)
      return std::string("diagonal round-trip failed");
    return std::string{};
  });

  check("balance-and-memory-formula", [&] {
    CubeTopology topo(p);
    Rng rng(s3);
    Matrix<T> m = random_matrix<T>(np, np, rng);
    auto fa = partition(m, Layout::Input, topo);
    auto fb = partition(m, Layout::Weight, topo);
    auto fc = partition(m, Layout::Output, topo);
    std::uint64_t mx = 0, mn = UINT64_MAX;
    for (int r = 0; r < topo.size(); ++r) {
      const std::uint64_t total = fa[r].shard.size() + fb[r].shard.size() + fc[r].shard.size();
      mx = std::max(mx, total);
      mn = std::min(mn, total);
    }
    if (mx != mn) return std::string("imbalanced shards");
    if (mx != per_rank_memory(np, np, np, p)) return std::string("memory formula mismatch");
    return std::string{};
  });

  check("block-product-golden", [&] {
    Rng rng(s4);
    Matrix<T> a = random_integer_matrix<T>(4, 4, rng);
    Matrix<T> b = random_integer_matrix<T>(4, 4, rng);
    MatmulArtifacts<T> run =
        run_matmul<T>(2, a, b, Matrix<T>(4, 4), MatmulForm::AB, sched);
    for (std::size_t bi = 0; bi < 2; ++bi)
      for (std::size_t bj = 0; bj < 2; ++bj) {
        Matrix<T> want(2, 2);
        for (std::size_t bl = 0; bl < 2; ++bl) {
          Matrix<T> ab = serial_matmul(a.block(bi * 2, bi * 2 + 2, bl * 2, bl * 2 + 2),
                                       b.block(bl * 2, bl * 2 + 2, bj * 2, bj * 2 + 2),
                                       MatmulForm::AB);
          for (std::size_t t = 0; t < 4; ++t) want.data[t] += ab.data[t];
        }
        if (!(run.c.block(bi * 2, bi * 2 + 2, bj * 2, bj * 2 + 2) == want))
          return std::string("block formula violated");
      }
    return std::string{};
  });

  auto matmul_check = [&](MatmulForm form) {
    return [&, form]() -> std::string {
      Rng rng(s4);
      Matrix<T> ai = random_integer_matrix<T>(np, np, rng);
      Matrix<T> bi = random_integer_matrix<T>(np, np, rng);
      Matrix<T> gi = random_integer_matrix<T>(np, np, rng);
      MatmulArtifacts<T> run = run_matmul<T>(p, ai, bi, gi, form, sched);
      if (!(run.c == serial_matmul(ai, bi, form)))
        return "integer forward not exact";
      if (!(run.da == serial_grad_a(gi, bi, form)))
        return "integer dA not exact";
      if (!(run.db == serial_grad_b(gi, ai, form)))
        return "integer dB not exact";
      Matrix<T> ar = random_matrix<T>(np, np, rng);
      Matrix<T> br = random_matrix<T>(np, np, rng);
      Matrix<T> gr = random_matrix<T>(np, np, rng);
      MatmulArtifacts<T> runr = run_matmul<T>(p, ar, br, gr, form, sched);
      if (rel_err(runr.c, serial_matmul(ar, br, form)) > tol_oracle)
        return "real forward above tolerance";
      if (rel_err(runr.da, serial_grad_a(gr, br, form)) > tol_oracle)
        return "real dA above tolerance";
      if (rel_err(runr.db, serial_grad_b(gr, ar, form)) > tol_oracle)
        return "real dB above tolerance";
      return {};
    };
  };
  check("matmul-oracle-ab", matmul_check(MatmulForm::AB));
  check("matmul-oracle-abt", matmul_check(MatmulForm::ABt));
  check("matmul-oracle-atb", matmul_check(MatmulForm::AtB));

  check("vector-op-oracles", [&] {
    Rng rng(s5);
    Matrix<T> a = random_matrix<T>(np, np, rng);
    std::vector<T> b = random_vector<T>(np, rng);
    Matrix<T> g = random_matrix<T>(np, np, rng);
    VecArtifacts<T> add = run_vec<T>(p, a, b, g, false, sched);
    Matrix<T> add_want = a;
    for (std::size_t r = 0; r < np; ++r)
      for (std::size_t c = 0; c < np; ++c) add_want(r, c) += b[c];
    if (rel_err(add.c, add_want) > tol_oracle) return std::string("add_vec forward off");
    std::vector<T> colsum(np, T(0));
    for (std::size_t r = 0; r < np; ++r)
      for (std::size_t c = 0; c < np; ++c) colsum[c] += g(r, c);
    if (rel_err(add.db, colsum) > tol_oracle) return std::string("add_vec db off");
    VecArtifacts<T> mul = run_vec<T>(p, a, b, g, true, sched);
    Matrix<T> mul_want = a;
    std::vector<T> mul_db(np, T(0));
    Matrix<T> mul_da = g;
    for (std::size_t r = 0; r < np; ++r)
      for (std::size_t c = 0; c < np; ++c) {
        mul_want(r, c) *= b[c];
        mul_db[c] += g(r, c) * a(r, c);
        mul_da(r, c) *= b[c];
      }
    if (rel_err(mul.c, mul_want) > tol_oracle) return std::string("mul_vec forward off");
    if (rel_err(mul.db, mul_db) > tol_oracle) return std::string("mul_vec db off");
    if (rel_err(mul.da, mul_da) > tol_oracle) return std::string("mul_vec da off");
    return std::string{};
  });

  check("counter-model-exactness", [&] {
    Rng rng(s5);
    Matrix<T> a = random_matrix<T>(np, np, rng);
    Matrix<T> b = random_matrix<T>(np, np, rng);
    CubeTopology topo(p);
    auto fa = partition(a, Layout::Input, topo);
    auto fb = partition(b, Layout::Weight, topo);
    Transport<T> tr(topo, sched);
    run_spmd(tr, [&](Endpoint<T>& ep) { matmul_ab_fwd(ep, fa[ep.rank()], fb[ep.rank()]); });
    const CostPrediction want = predict_costs(np, np, np, p);
    for (int r = 0; r < topo.size(); ++r) {
      if (tr.counters(r).elements_received != want.comm_elems)
        return std::string("per-rank received != model");
      if (tr.counters(r).elements_sent != want.comm_elems)
        return std::string("per-rank sent != model");
      if (tr.counters(r).multiply_adds != want.multiply_adds)
        return std::string("per-rank multiply-adds != model");
    }
    return std::string{};
  });

  if (f64) {
    check("op-gradient-fd", [&] {
      Rng rng(s1);
      Matrix<T> a = random_matrix<T>(np, np, rng);
      Matrix<T> b = random_matrix<T>(np, np, rng);
      Matrix<T> g = random_matrix<T>(np, np, rng);
      for (MatmulForm form : {MatmulForm::AB, MatmulForm::ABt, MatmulForm::AtB}) {
        MatmulArtifacts<T> run = run_matmul<T>(p, a, b, g, form, sched);
        Matrix<T> probe = a;
        auto loss = [&] {
          Matrix<T> c = serial_matmul(probe, b, form);
          double acc = 0;
          for (std::size_t t = 0; t < c.data.size(); ++t)
            acc += static_cast<double>(g.data[t]) * static_cast<double>(c.data[t]);
          return acc;
        };
        for (std::size_t t : fd_indices(probe.data.size(), opts.full_fd)) {
          const T saved = probe.data[t];
          probe.data[t] = saved + T(1e-5);
          const double up = loss();
          probe.data[t] = saved - T(1e-5);
          const double down = loss();
          probe.data[t] = saved;
          const double fd = (up - down) / 2e-5;
          if (std::abs(fd - static_cast<double>(run.da.data[t])) >
              1e-6 * (1.0 + std::abs(static_cast<double>(run.da.data[t]))))
            return std::string("finite differences disagree with dA");
        }
      }
      return std::string{};
    });
  }

  // --- layer-level checks at the requested configuration ---
  Rng rng_layer(opts.seed);
  const GlobalLayerParams<T> gp = init_layer_params<T>(cfg, opts.seed);
  Matrix<T> x = random_matrix<T>(cfg.batch * cfg.seq, cfg.hidden, rng_layer);
  Matrix<T> dy = random_matrix<T>(cfg.batch * cfg.seq, cfg.hidden, rng_layer);
  LayerArtifacts<T> layer = run_layer<T>(cfg, gp, x, dy, sched);
  RefLayerCache<T> ref_cache;
  Matrix<T> y_ref = ref_layer_fwd(cfg, x, gp, &ref_cache);
  RefLayerGrads<T> ref = ref_layer_bwd(cfg, dy, ref_cache, gp);

  check("layer-forward-oracle", [&] {
    return expect(rel_err(layer.y, y_ref) <= tol_layer, "forward above tolerance");
  });

  check("layer-backward-oracle", [&] {
    if (rel_err(layer.dx, ref.dx) > tol_layer) return std::string("dx above tolerance");
    if (rel_err(layer.dparams.w_qkv, ref.dparams.w_qkv) > tol_layer) return std::string("dW_qkv off");
    if (rel_err(layer.dparams.b_qkv, ref.dparams.b_qkv) > tol_layer) return std::string("db_qkv off");
    if (rel_err(layer.dparams.w_out, ref.dparams.w_out) > tol_layer) return std::string("dW_out off");
    if (rel_err(layer.dparams.b_out, ref.dparams.b_out) > tol_layer) return std::string("db_out off");
    if (rel_err(layer.dparams.w_fc1, ref.dparams.w_fc1) > tol_layer) return std::string("dW_fc1 off");
    if (rel_err(layer.dparams.b_fc1, ref.dparams.b_fc1) > tol_layer) return std::string("db_fc1 off");
    if (rel_err(layer.dparams.w_fc2, ref.dparams.w_fc2) > tol_layer) return std::string("dW_fc2 off");
    if (rel_err(layer.dparams.b_fc2, ref.dparams.b_fc2) > tol_layer) return std::string("db_fc2 off");
    if (rel_err(layer.dparams.ln1_gamma, ref.dparams.ln1_gamma) > tol_layer)
      return std::string("dgamma1 off");
    if (rel_err(layer.dparams.ln2_beta, ref.dparams.ln2_beta) > tol_layer)
      return std::string("dbeta2 off");
    return std::string{};
  });

  if (f64) {
    check("layer-gradient-fd", [&] {
      GlobalLayerParams<T> probe = gp;
      auto loss = [&] {
        Matrix<T> y = ref_layer_fwd(cfg, x, probe);
        double acc = 0;
        for (std::size_t t = 0; t < y.data.size(); ++t)
          acc += static_cast<double>(dy.data[t]) * static_cast<double>(y.data[t]);
        return acc;
      };
      auto fd_check = [&](std::vector<T>& theta, const std::vector<T>& got, double tol) {
        for (std::size_t t : fd_indices(theta.size(), opts.full_fd)) {
          const T saved = theta[t];
          theta[t] = saved + T(1e-5);
          const double up = loss();
          theta[t] = saved - T(1e-5);
          const double down = loss();
          theta[t] = saved;
          const double fd = (up - down) / 2e-5;
          if (std::abs(fd - static_cast<double>(got[t])) >
              tol * (1.0 + std::abs(static_cast<double>(got[t]))))
            return false;
        }
        return true;
      };
      // softmax paths at 1e-5, the rest at 1e-6
      if (!fd_check(probe.w_qkv.data, layer.dparams.w_qkv.data, 1e-5)) return std::string("w_qkv fd");
      if (!fd_check(probe.b_qkv, layer.dparams.b_qkv, 1e-5)) return std::string("b_qkv fd");
      if (!fd_check(probe.w_out.data, layer.dparams.w_out.data, 1e-5)) return std::string("w_out fd");
      if (!fd_check(probe.b_out, layer.dparams.b_out, 1e-6)) return std::string("b_out fd");
      if (!fd_check(probe.w_fc1.data, layer.dparams.w_fc1.data, 1e-6)) return std::string("w_fc1 fd");
      if (!fd_check(probe.b_fc1, layer.dparams.b_fc1, 1e-6)) return std::string("b_fc1 fd");
      if (!fd_check(probe.w_fc2.data, layer.dparams.w_fc2.data, 1e-6)) return std::string("w_fc2 fd");
      if (!fd_check(probe.b_fc2, layer.dparams.b_fc2, 1e-6)) return std::string("b_fc2 fd");
      if (!fd_check(probe.ln1_gamma, layer.dparams.ln1_gamma, 1e-5)) return std::string("gamma1 fd");
      if (!fd_check(probe.ln1_beta, layer.dparams.ln1_beta, 1e-5)) return std::string("beta1 fd");
      if (!fd_check(probe.ln2_gamma, layer.dparams.ln2_gamma, 1e-6)) return std::string("gamma2 fd");
      if (!fd_check(probe.ln2_beta, layer.dparams.ln2_beta, 1e-6)) return std::string("beta2 fd");
      Matrix<T> x_probe = x;
      GlobalLayerParams<T> frozen = gp;
      auto loss_x = [&] {
        Matrix<T> y = ref_layer_fwd(cfg, x_probe, frozen);
        double acc = 0;
        for (std::size_t t = 0; t < y.data.size(); ++t)
          acc += static_cast<double>(dy.data[t]) * static_cast<double>(y.data[t]);
        return acc;
      };
      for (std::size_t t : fd_indices(x_probe.data.size(), opts.full_fd)) {
        const T saved = x_probe.data[t];
        x_probe.data[t] = saved + T(1e-5);
        const double up = loss_x();
        x_probe.data[t] = saved - T(1e-5);
        const double down = loss_x();
        x_probe.data[t] = saved;
        const double fd = (up - down) / 2e-5;
        if (std::abs(fd - static_cast<double>(layer.dx.data[t])) >
            1e-5 * (1.0 + std::abs(static_cast<double>(layer.dx.data[t]))))
          return std::string("dx fd");
      }
      return std::string{};
    });
  }

  check("layer-traffic-exactness", [&] {
    std::uint64_t sent = 0, received = 0;
    for (const auto& c : layer.counters) {
      sent += c.elements_sent;
      received += c.elements_received;
    }
    const std::uint64_t want =
        traffic::transformer_layer_fwd(cfg) + traffic::transformer_layer_bwd(cfg);
    if (sent != want) return "sent " + std::to_string(sent) + " != " + std::to_string(want);
    if (received != want) return std::string("received != model");
    return std::string{};
  });

  check("activation-balance", [&] {
    const std::size_t want =
        cfg.batch * cfg.seq * cfg.hidden / (static_cast<std::size_t>(p) * p * p);
    for (std::size_t s : layer.boundary_sizes)
      if (s != want) return std::string("activation block size off");
    return std::string{};
  });

  check("group-index-machinery", [&] {
    if (layer.group_after != 0) return std::string("layer did not preserve the group index");
    GroupState gs{0};
    gs.toggle();
    if (gs.input_group != 1) return std::string("toggle broken");
    gs.toggle();
    if (gs.input_group != 0) return std::string("toggle involution broken");
    // two stacked layers end-to-end with no re-sharding
    TransformerConfig two = cfg;
    two.layers = 2;
    const GlobalLayerParams<T> gp1 = init_layer_params<T>(two, opts.seed + 1);
    StackArtifacts<T> stack = run_stack<T>(two, {gp, gp1}, x, dy, sched);
    RefStackResult<T> sref = serial_transformer_reference(two, x, {gp, gp1}, dy);
    if (stack.group_after != 0) return std::string("stack changed the group index");
    if (rel_err(stack.y, sref.y) > tol_stack) return std::string("stack forward above tolerance");
    if (rel_err(stack.dx, sref.dx) > tol_stack) return std::string("stack dx above tolerance");
    return std::string{};
  });

  check("scaling-ratios", [&] {
    const std::uint64_t m = 16;
    const CostPrediction c1 = predict_costs(m, m, m, 1);
    const CostPrediction c2 = predict_costs(m, m, m, 2);
    if (c1.multiply_adds != 8 * c2.multiply_adds) return std::string("compute ratio != 8");
    if (c1.memory_elems != 8 * c2.memory_elems) return std::string("memory ratio != 8");
    if (c1.comm_elems != 0) return std::string("p=1 comm not zero");
    // comm(p)/comm(2p) == 8(p-1)/(2p-1) as exact integer cross-products, p in {1,2,3}
    const std::uint64_t big = 144;  // divisible by p^2 for p up to 6
    for (std::uint64_t pp : {1u, 2u, 3u}) {
      const CostPrediction lo = predict_costs(big, big, big, static_cast<int>(pp));
      const CostPrediction hi = predict_costs(big, big, big, static_cast<int>(2 * pp));
      if (lo.comm_elems * (2 * pp - 1) != hi.comm_elems * 8 * (pp - 1))
        return std::string("bandwidth ratio check failed at p=" + std::to_string(pp));
    }
    return std::string{};
  });

  check("table-arithmetic", [&] {
    auto round3 = [](double v) { return std::round(v * 1000.0) / 1000.0; };
    if (round3(average_step(4.759, 15.676, 60)) != 0.341)
      return std::string("1-D 8-GPU row does not give 0.341");
    if (round3(average_step(30.096, 81.212, 192)) != 0.580)
      return std::string("3-D 8-GPU row does not give 0.580");
    return std::string{};
  });

  check("run-determinism", [&] {
    LayerArtifacts<T> again = run_layer<T>(cfg, gp, x, dy, sched);
    if (!(again.y == layer.y)) return std::string("repeated forward differs");
    if (!(again.dx == layer.dx)) return std::string("repeated backward differs");
    if (!(again.dparams.w_qkv == layer.dparams.w_qkv)) return std::string("repeated dW differs");
    return std::string{};
  });

  os << (passed == total ? "VERIFY PASS" : "VERIFY FAIL") << " (" << passed << "/" << total
     << " checks)\n";
  return passed == total;
}

}  // namespace cube3d
