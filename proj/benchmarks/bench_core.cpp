#include <benchmark/benchmark.h>

#include <random>

#include "dba/block_matrix.hpp"
#include "dba/edge_eval.hpp"
#include "dba/solver.hpp"
#include "dba/synthetic.hpp"

namespace {

using namespace dba;

BAProblem<double>& bench_problem() {
  static BAProblem<double> problem = [] {
    SyntheticOptions opt;
    opt.cameras = 100;
    opt.points = 2000;
    opt.obs_per_point = 25;
    opt.seed = 17;
    return generate_synthetic(opt);
  }();
  return problem;
}

void BM_JetMul(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  JetVector<double> a(n, kLocalParams), b(n, kLocalParams), out;
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> dist(0.5, 2.0);
  for (auto& v : a.values()) v = dist(rng);
  for (auto& v : b.values()) v = dist(rng);
  for (auto _ : state) {
    jv::mul(a, b, out);
    benchmark::DoNotOptimize(out.values().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_JetMul)->Range(1 << 10, 1 << 18);

void BM_Linearize(benchmark::State& state) {
  auto& problem = bench_problem();
  const auto parts = partition_edges(problem, 1);
  EdgeEvaluator<double> evaluator(problem, parts[0]);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const std::span<const double> xc{x_c.data(), std::size_t(x_c.size())};
  const std::span<const double> xp{x_p.data(), std::size_t(x_p.size())};
  for (auto _ : state) {
    const auto& batch = evaluator.linearize(xc, xp);
    benchmark::DoNotOptimize(batch.rx.values().data());
  }
  state.SetItemsProcessed(state.iterations() * problem.num_observations());
}
BENCHMARK(BM_Linearize);

void BM_Assemble(benchmark::State& state) {
  auto& problem = bench_problem();
  const auto parts = partition_edges(problem, 1);
  EdgeEvaluator<double> evaluator(problem, parts[0]);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const auto& batch =
      evaluator.linearize({x_c.data(), std::size_t(x_c.size())},
                          {x_p.data(), std::size_t(x_p.size())});
  PartitionedHessian<double> hessian(problem, parts[0]);
  for (auto _ : state) {
    assemble_local(batch, evaluator, hessian);
    benchmark::DoNotOptimize(hessian.v.data());
  }
  state.SetItemsProcessed(state.iterations() * problem.num_observations());
}
BENCHMARK(BM_Assemble);

void BM_CouplingSpmv(benchmark::State& state) {
  auto& problem = bench_problem();
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const auto hessian = assemble_local<double>(
      problem, parts[0], {x_c.data(), std::size_t(x_c.size())},
      {x_p.data(), std::size_t(x_p.size())});
  Eigen::VectorXd x = Eigen::VectorXd::Random(hessian.E.camera_dim());
  Eigen::VectorXd out(hessian.E.point_dim());
  for (auto _ : state) {
    hessian.E.apply_transpose({x.data(), std::size_t(x.size())},
                              {out.data(), std::size_t(out.size())});
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * hessian.E.blocks());
}
BENCHMARK(BM_CouplingSpmv);

void BM_DseApply(benchmark::State& state) {
  auto& problem = bench_problem();
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  auto hessian = assemble_local<double>(
      problem, parts[0], {x_c.data(), std::size_t(x_c.size())},
      {x_p.data(), std::size_t(x_p.size())});
  BlockDiagonal<double, kCameraParams> b_damped;
  BlockDiagonal<double, kPointParams> c_damped;
  hessian.B.damp_into(1e-4, DampingPolicy::identity, b_damped);
  hessian.C.damp_into(1e-4, DampingPolicy::identity, c_damped);
  FactoredBlockDiagonal<double, kPointParams> c_inv;
  c_inv.factor(c_damped);
  WorkerGroup group(1);
  Eigen::VectorXd x = Eigen::VectorXd::Random(b_damped.dim());
  Eigen::VectorXd out;
  DseWorkspace<double> ws;
  run_on_workers(group, [&](int rank) {
    for (auto _ : state) {
      dse(x, b_damped, hessian.E, c_inv, group, rank, out, ws);
      benchmark::DoNotOptimize(out.data());
    }
  });
  state.SetItemsProcessed(state.iterations() * hessian.E.blocks());
}
BENCHMARK(BM_DseApply);

void BM_LmIteration(benchmark::State& state) {
  auto& problem = bench_problem();
  for (auto _ : state) {
    SolverConfig config;
    config.max_iterations = 1;
    const auto solved = lm_solve(problem, config);
    benchmark::DoNotOptimize(solved.cost);
  }
}
BENCHMARK(BM_LmIteration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
