// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

// cube3d: deterministic desk-scale 3-D tensor parallelism.
//
//   cube3d verify --p 2 --hidden 16 --seq 8 --batch 2 --heads 2 --seed 7
//   cube3d bench --mode weak --p-list 1,2 --out weak.csv
//   cube3d matmul --form ab --a A.bin --b B.bin --p 2 --out C.bin
//
// Exit codes: 0 success, 1 verification/runtime failure, 2 usage errors.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cube3d/bench.hpp"
#include "cube3d/matrix_io.hpp"
#include "cube3d/verify.hpp"

namespace {

using namespace cube3d;

struct VerifyArgs {
  VerifyOptions opts;
  std::string dtype = "f64";
  std::string scheduler = "threads";
};

int run_verify_cmd(VerifyArgs& args) {
  args.opts.scheduler = args.scheduler == "lockstep" ? Scheduler::lockstep : Scheduler::threads;
  const bool ok = args.dtype == "f32" ? run_verify<float>(args.opts, std::cout)
                                      : run_verify<double>(args.opts, std::cout);
  return ok ? 0 : 1;
}

struct BenchArgs {
  std::string mode = "weak";
  std::vector<int> p_list{1, 2};
  TransformerConfig base;
  double lambda = 1.0;
  std::string out;
};

int run_bench_cmd(BenchArgs& args) {
  const ScalingMode mode = args.mode == "strong" ? ScalingMode::strong : ScalingMode::weak;
  std::vector<BenchRow> rows;
  try {
    rows = run_scaling(mode, args.base, args.p_list, args.lambda);
  } catch (const ConfigInvalid& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const HeadsIndivisible& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  if (args.out.empty()) {
    write_scaling_csv(std::cout, rows);
  } else {
    std::ofstream os(args.out, std::ios::binary);  // binary keeps LF endings
    if (!os) {
      std::cerr << "cannot open " << args.out << " for writing\n";
      return 1;
    }
    write_scaling_csv(os, rows);
  }
  return 0;
}

struct MatmulArgs {
  std::string form = "ab";
  std::string a_path, b_path, out_path;
  int p = 1;
  std::string scheduler = "threads";
};

template <typename T>
int run_matmul_typed(const MatmulArgs& args) {
  Matrix<T> a = read_matrix_file<T>(args.a_path);
  Matrix<T> b = read_matrix_file<T>(args.b_path);
  CubeTopology topo(args.p);
  std::vector<ShardedMatrix<T>> fa, fb;
  if (args.form == "ab") {
    fa = partition(a, Layout::Input, topo);
    fb = partition(b, Layout::Weight, topo);
  } else if (args.form == "abt") {
    fa = partition(a, Layout::Input, topo);
    fb = partition(b, Layout::WeightOfTranspose, topo);
  } else {
    fa = partition(a, Layout::Input, topo);
    fb = partition(b, Layout::Input, topo, canonical_directions().swapped());
  }
  std::vector<ShardedMatrix<T>> fc(topo.size());
  Transport<T> tr(topo, args.scheduler == "lockstep" ? Scheduler::lockstep : Scheduler::threads);
  run_spmd(tr, [&](Endpoint<T>& ep) {
    const int r = ep.rank();
    if (args.form == "ab")
      fc[r] = matmul_ab_fwd(ep, fa[r], fb[r]);
    else if (args.form == "abt")
      fc[r] = matmul_abt_fwd(ep, fa[r], fb[r]);
    else
      fc[r] = matmul_atb_fwd(ep, fa[r], fb[r]);
  });
  write_matrix_file(args.out_path, collect(fc));
  return 0;
}

int run_matmul_cmd(const MatmulArgs& args) {
  const std::uint8_t dtype_a = matrix_file_dtype(args.a_path);
  const std::uint8_t dtype_b = matrix_file_dtype(args.b_path);
  if (dtype_a != dtype_b) {
    std::cerr << "operand files carry different dtypes\n";
    return 2;
  }
  return dtype_a == 0 ? run_matmul_typed<double>(args) : run_matmul_typed<float>(args);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic 3-D tensor-parallel Transformer linear algebra on a p^3 rank cube"};
  app.require_subcommand(1);

  VerifyArgs vargs;
  CLI::App* verify = app.add_subcommand(
      "verify", "Run the oracle/gradient/counter property suite; exit 0 iff everything passes");
  verify->add_option("--p", vargs.opts.p, "Cube side (P = p^3 ranks)")->check(CLI::PositiveNumber);
  verify->add_option("--batch", vargs.opts.batch, "Batch size");
  verify->add_option("--seq", vargs.opts.seq, "Sequence length");
  verify->add_option("--heads", vargs.opts.heads, "Attention heads");
  verify->add_option("--hidden", vargs.opts.hidden, "Hidden size");
  verify->add_option("--layers", vargs.opts.layers, "Transformer layers");
  verify->add_option("--seed", vargs.opts.seed, "Seed for all fixed-seed inputs");
  verify->add_option("--dtype", vargs.dtype, "Scalar kind")->check(CLI::IsMember({"f32", "f64"}));
  verify->add_option("--scheduler", vargs.scheduler, "Worker scheduler")
      ->check(CLI::IsMember({"threads", "lockstep"}));
  verify->add_flag("--full-fd", vargs.opts.full_fd,
                   "Finite-difference every parameter element (slower)");

  BenchArgs bargs;
  bargs.base.batch = 2;
  bargs.base.seq = 8;
  bargs.base.heads = 2;
  bargs.base.hidden = 16;
  bargs.base.layers = 1;
  CLI::App* bench = app.add_subcommand(
      "bench", "Emit weak/strong scaling tables of modeled cost units as CSV");
  bench->add_option("--mode", bargs.mode, "Scaling mode")
      ->check(CLI::IsMember({"weak", "strong"}));
  bench->add_option("--p-list", bargs.p_list, "Cube sides to tabulate")->delimiter(',');
  bench->add_option("--batch", bargs.base.batch, "Base batch size");
  bench->add_option("--seq", bargs.base.seq, "Sequence length");
  bench->add_option("--heads", bargs.base.heads, "Base attention heads");
  bench->add_option("--hidden", bargs.base.hidden, "Base hidden size");
  bench->add_option("--layers", bargs.base.layers, "Transformer layers");
  bench->add_option("--lambda", bargs.lambda,
                    "Weight of communicated elements in the cost unit");
  bench->add_option("--out", bargs.out, "CSV output path (stdout when omitted)");

  MatmulArgs margs;
  CLI::App* matmul = app.add_subcommand(
      "matmul", "Run one 3-D matmul form over matrix files and write the result");
  matmul->add_option("--form", margs.form, "Product form")
      ->check(CLI::IsMember({"ab", "abt", "atb"}));
  matmul->add_option("--a", margs.a_path, "Left operand file")->required();
  matmul->add_option("--b", margs.b_path, "Right operand file")->required();
  matmul->add_option("--p", margs.p, "Cube side")->check(CLI::PositiveNumber);
  matmul->add_option("--out", margs.out_path, "Result file")->required();
  matmul->add_option("--scheduler", margs.scheduler, "Worker scheduler")
      ->check(CLI::IsMember({"threads", "lockstep"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (verify->parsed()) return run_verify_cmd(vargs);
    if (bench->parsed()) return run_bench_cmd(bargs);
    if (matmul->parsed()) return run_matmul_cmd(margs);
  } catch (const ConfigInvalid& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const HeadsIndivisible& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 2;
}
