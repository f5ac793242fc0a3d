#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dba/block_matrix.hpp"
#include "dba/comms.hpp"
#include "dba/counters.hpp"
#include "dba/edge_eval.hpp"
#include "dba/errors.hpp"
#include "dba/partition.hpp"
#include "dba/problem.hpp"

namespace dba {

enum class Precision { fp32, fp64 };

inline const char* to_string(Precision p) {
  return p == Precision::fp32 ? "fp32" : "fp64";
}

enum class TerminationReason { converged, max_iterations, stalled };

inline const char* to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::converged: return "converged";
    case TerminationReason::max_iterations: return "max_iterations";
    default: return "stalled";
  }
}

enum class ConvergenceDecision { keep_going, converged, max_iterations, stalled };

struct SolverConfig {
  int workers = 1;
  int max_iterations = 50;
  double pcg_tol = 1e-6;
  int pcg_max_iters = 500;
  double lambda0 = 1e-4;
  double lambda_max = 1e32;
  double rel_tol = 1e-6;
  double step_tol = 1e-8;
  // Scale-invariant damping handles the wide per-parameter curvature spread
  // of reprojection problems; the plain lambda*I policy stays selectable.
  DampingPolicy damping = DampingPolicy::diag_scaled;
  MseConvention mse = MseConvention::half_per_observation;
  JacobianMode jacobian = JacobianMode::autodiff;
  bool check_rank_identity = false;
  std::chrono::milliseconds collective_timeout{60000};
};

struct IterationRecord {
  int iteration = 0;
  double cost = 0;
  double mse = 0;
  double lambda = 0;
  int pcg_iterations = 0;
  bool accepted = false;
  double wall_seconds = 0;
  // Per-worker edge-proportional work in this iteration (index = rank).
  std::vector<std::uint64_t> worker_edges;
  std::vector<std::uint64_t> worker_block_ops;
};

template <typename Scalar>
struct SolverState {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> x_c, x_p;
  double lambda = 0;
  double nu = 2;
  int iteration = 0;
  double cost = 0;
  TerminationReason termination = TerminationReason::max_iterations;
  std::vector<IterationRecord> history;

  // Most recent trial, feeding the convergence decision.
  bool last_accepted = false;
  double last_cost_change = std::numeric_limits<double>::infinity();
  double last_step_inf = std::numeric_limits<double>::infinity();
  double previous_cost = std::numeric_limits<double>::infinity();
};

/// Convergence control: converged when an accepted step changed the cost by
/// less than rel_tol (relatively) or moved the state by less than step_tol in
/// the infinity norm; stalled when damping has grown past lambda_max;
/// max_iterations at the iteration cap.
template <typename Scalar>
ConvergenceDecision check_convergence(const SolverState<Scalar>& state,
                                      const SolverConfig& config) {
  if (state.last_accepted) {
    const double denom = std::max(state.previous_cost, 1e-300);
    if (std::abs(state.last_cost_change) / denom < config.rel_tol ||
        state.last_step_inf < config.step_tol)
      return ConvergenceDecision::converged;
  }
  if (state.lambda > config.lambda_max) return ConvergenceDecision::stalled;
  if (state.iteration >= config.max_iterations)
    return ConvergenceDecision::max_iterations;
  return ConvergenceDecision::keep_going;
}

namespace detail {

template <typename Scalar>
double dot_d(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& a,
             const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& b) {
  double sum = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return sum;
}

template <typename Scalar>
double norm2_d(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& a) {
  return std::sqrt(dot_d(a, a));
}

template <typename Scalar>
std::span<Scalar> as_span(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}
template <typename Scalar>
std::span<const Scalar> as_span(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace detail

template <typename Scalar>
struct DseWorkspace {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> point_tmp, camera_tmp;

  void resize(std::int64_t camera_dim, std::int64_t point_dim) {
    point_tmp.resize(point_dim);
    camera_tmp.resize(camera_dim);
  }
};

/// Distributed Schur elimination: applies the reduced camera operator
/// (B - E C^{-1} E^T) to x without ever forming E globally,
///   a_k = E_k^T x; a = allreduce(a_k); b = C^{-1} a;
///   c_k = E_k b;   c = allreduce(c_k); d = B x;  out = d - c.
/// All ranks must call collectively; the result is rank-identical.
template <typename Scalar>
void dse(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x,
         const BlockDiagonal<Scalar, kCameraParams>& B,
         const EdgeBlockMatrix<Scalar>& E,
         const FactoredBlockDiagonal<Scalar, kPointParams>& C_inv,
         WorkerGroup& group, int rank,
         Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& out,
         DseWorkspace<Scalar>& ws, WorkCounters* counters = nullptr) {
  ws.resize(E.camera_dim(), E.point_dim());
  out.resize(E.camera_dim());
  E.apply_transpose(detail::as_span(x), detail::as_span(ws.point_tmp),
                    counters);
  group.allreduce_sum(rank, detail::as_span(ws.point_tmp));
  C_inv.solve_in_place(detail::as_span(ws.point_tmp));
  E.apply(detail::as_span(ws.point_tmp), detail::as_span(ws.camera_tmp),
          counters);
  group.allreduce_sum(rank, detail::as_span(ws.camera_tmp));
  B.apply(detail::as_span(x), detail::as_span(out));
  out -= ws.camera_tmp;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dse(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x,
    const BlockDiagonal<Scalar, kCameraParams>& B,
    const EdgeBlockMatrix<Scalar>& E,
    const FactoredBlockDiagonal<Scalar, kPointParams>& C_inv,
    WorkerGroup& group, int rank) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out;
  DseWorkspace<Scalar> ws;
  dse(x, B, E, C_inv, group, rank, out, ws);
  return out;
}

template <typename Scalar>
struct PcgWorkspace {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> r, z, p, q;
  DseWorkspace<Scalar> dse_ws;
};

struct PcgResult {
  int iterations = 0;
  bool converged = false;
};

/// Distributed preconditioned conjugate gradient on the reduced camera
/// system (B - E C^{-1} E^T) x = rhs, with the block-Jacobi preconditioner
/// z = B^{-1} r. Terminates when |r| <= tol * |rhs| or at max_iters. Every
/// 50 iterations the residual is recomputed from scratch. All scalar
/// recurrences are evaluated redundantly on every rank from rank-identical
/// inputs, so the returned x is rank-identical.
/// Throws PcgBreakdownError when rho or p'q lose positivity (the LM loop
/// reacts by raising lambda).
template <typename Scalar>
PcgResult dpcg(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x,
               const BlockDiagonal<Scalar, kCameraParams>& B_damped,
               const FactoredBlockDiagonal<Scalar, kCameraParams>& B_inv,
               const EdgeBlockMatrix<Scalar>& E,
               const FactoredBlockDiagonal<Scalar, kPointParams>& C_inv,
               const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& rhs,
               WorkerGroup& group, int rank, double tol, int max_iters,
               PcgWorkspace<Scalar>& ws, WorkCounters* counters = nullptr) {
  const double rhs_norm = detail::norm2_d(rhs);
  if (rhs_norm == 0.0) {
    x.setZero(rhs.size());
    return {0, true};
  }

  dse(x, B_damped, E, C_inv, group, rank, ws.q, ws.dse_ws, counters);
  ws.r = rhs - ws.q;

  double rho_prev = 0;
  int n = 0;
  double r_norm = detail::norm2_d(ws.r);
  while (r_norm > tol * rhs_norm && n < max_iters) {
    ws.z = ws.r;
    B_inv.solve_in_place(detail::as_span(ws.z));
    const double rho = detail::dot_d(ws.r, ws.z);
    if (!std::isfinite(rho) || rho <= 0)
      throw PcgBreakdownError("preconditioned residual norm rho = " +
                              std::to_string(rho) + " at iteration " +
                              std::to_string(n));
    if (n == 0) {
      ws.p = ws.z;
    } else {
      const Scalar beta = static_cast<Scalar>(rho / rho_prev);
      ws.p = ws.z + beta * ws.p;
    }
    dse(ws.p, B_damped, E, C_inv, group, rank, ws.q, ws.dse_ws, counters);
    const double pq = detail::dot_d(ws.p, ws.q);
    if (!std::isfinite(pq) || pq <= 0)
      throw PcgBreakdownError(
          "operator lost positive definiteness (p'q = " + std::to_string(pq) +
          ") at iteration " + std::to_string(n));
    const Scalar alpha = static_cast<Scalar>(rho / pq);
    x += alpha * ws.p;
    ++n;
    if (n % 50 == 0) {
      // Guard against drift between the recurrence and the true residual.
      dse(x, B_damped, E, C_inv, group, rank, ws.q, ws.dse_ws, counters);
      ws.r = rhs - ws.q;
    } else {
      ws.r -= alpha * ws.q;
    }
    rho_prev = rho;
    r_norm = detail::norm2_d(ws.r);
  }
  return {n, r_norm <= tol * rhs_norm};
}

namespace detail {

// Local cost with degenerate trials mapped to +inf, then summed across ranks.
// Keeping the allreduce unconditional keeps the collective schedule aligned
// even when only some ranks hit a degenerate edge.
template <typename Scalar>
double distributed_cost(const EdgeEvaluator<Scalar>& evaluator,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x_c,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x_p,
                        WorkerGroup& group, int rank, WorkCounters* counters,
                        std::int64_t* degenerate_edge = nullptr) {
  double local = 0;
  try {
    local = evaluator.cost(as_span(x_c), as_span(x_p), counters);
  } catch (const DegenerateDepthError& e) {
    local = std::numeric_limits<double>::infinity();
    if (degenerate_edge) *degenerate_edge = e.edge_id();
  }
  return group.allreduce_sum(rank, local);
}

}  // namespace detail

/// One rank's body of the distributed Levenberg-Marquardt loop. All ranks
/// must run it collectively on the same problem and config; the returned
/// state is rank-identical (costs, lambda, parameters) up to per-rank wall
/// clock readings.
///
/// Per iteration: linearize the partition's edges, assemble the local normal
/// equations, all-reduce B/C/v/w, damp and factor the diagonals, form the
/// reduced right-hand side g = v - allreduce(E C^{-1} w), solve the reduced
/// camera system with DPCG, back-substitute the point increment, then accept
/// or reject the trial by the gain ratio with Nielsen's damping schedule
/// (accept: lambda *= max(1/3, 1 - (2 rho - 1)^3), nu = 2; reject:
/// lambda *= nu, nu *= 2). Rejected trials reuse the assembled undamped
/// system and only re-damp and re-factor the diagonals.
template <typename Scalar>
SolverState<Scalar> lm_solve_rank(const BAProblem<Scalar>& problem,
                                  const SolverConfig& config,
                                  const EdgePartition& partition,
                                  WorkerGroup& group, int rank) {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const auto start_time = std::chrono::steady_clock::now();
  const std::int64_t num_obs = problem.num_observations();
  const int k_workers = group.workers();

  SolverState<Scalar> state;
  state.x_c = pack_cameras(problem);
  state.x_p = pack_points(problem);
  state.lambda = config.lambda0;
  state.nu = 2.0;

  EdgeEvaluator<Scalar> evaluator(problem, partition, config.jacobian);
  PartitionedHessian<Scalar> hessian(problem, partition);
  BlockDiagonal<Scalar, kCameraParams> b_damped;
  BlockDiagonal<Scalar, kPointParams> c_damped;
  FactoredBlockDiagonal<Scalar, kCameraParams> b_factored;
  FactoredBlockDiagonal<Scalar, kPointParams> c_factored;
  PcgWorkspace<Scalar> pcg_ws;
  WorkCounters counters;

  std::int64_t degenerate_edge = -1;
  state.cost = detail::distributed_cost(evaluator, state.x_c, state.x_p, group,
                                        rank, &counters, &degenerate_edge);
  if (!std::isfinite(state.cost)) throw DegenerateDepthError(degenerate_edge);

  bool have_system = false;
  Vec g, dx_c, dx_p, trial_x_c, trial_x_p, point_tmp, camera_tmp;

  for (;;) {
    const WorkCounters iteration_start = counters;
    if (!have_system) {
      const auto& batch =
          evaluator.linearize(detail::as_span(state.x_c),
                              detail::as_span(state.x_p), &counters);
      assemble_local(batch, evaluator, hessian);
      group.allreduce_sum(rank, hessian.B.data());
      group.allreduce_sum(rank, hessian.C.data());
      group.allreduce_sum(rank, detail::as_span(hessian.v));
      group.allreduce_sum(rank, detail::as_span(hessian.w));
      have_system = true;
    }

    const double lambda = state.lambda;
    bool accepted = false;
    bool factorization_ok = true;
    double cost_new = std::numeric_limits<double>::infinity();
    double step_inf = 0;
    int pcg_iterations = 0;

    try {
      hessian.B.damp_into(static_cast<Scalar>(lambda), config.damping,
                          b_damped);
      hessian.C.damp_into(static_cast<Scalar>(lambda), config.damping,
                          c_damped);
      c_factored.factor(c_damped);
      b_factored.factor(b_damped);

      // g = v - allreduce(E_k C^{-1} w)
      point_tmp = c_factored.solve(hessian.w);
      camera_tmp.resize(hessian.E.camera_dim());
      hessian.E.apply(detail::as_span(point_tmp),
                      detail::as_span(camera_tmp), &counters);
      group.allreduce_sum(rank, detail::as_span(camera_tmp));
      g = hessian.v - camera_tmp;

      dx_c = Vec::Zero(hessian.E.camera_dim());
      const PcgResult pcg =
          dpcg(dx_c, b_damped, b_factored, hessian.E, c_factored, g, group,
               rank, config.pcg_tol, config.pcg_max_iters, pcg_ws, &counters);
      pcg_iterations = pcg.iterations;

      // dx_p = C^{-1}(w - allreduce(E_k^T dx_c))
      point_tmp.resize(hessian.E.point_dim());
      hessian.E.apply_transpose(detail::as_span(dx_c),
                                detail::as_span(point_tmp), &counters);
      group.allreduce_sum(rank, detail::as_span(point_tmp));
      dx_p = c_factored.solve(hessian.w - point_tmp);

      trial_x_c = state.x_c + dx_c;
      trial_x_p = state.x_p + dx_p;
      cost_new = detail::distributed_cost(evaluator, trial_x_c, trial_x_p,
                                          group, rank, &counters);

      step_inf = 0;
      for (Eigen::Index i = 0; i < dx_c.size(); ++i)
        step_inf = std::max(step_inf, std::abs(static_cast<double>(dx_c[i])));
      for (Eigen::Index i = 0; i < dx_p.size(); ++i)
        step_inf = std::max(step_inf, std::abs(static_cast<double>(dx_p[i])));

      // Gain ratio with the model decrease 1/2 dx'(lambda D dx + g_full);
      // the 1/2 cancels against the halved actual decrease.
      double damping_term = 0;
      if (config.damping == DampingPolicy::identity) {
        damping_term =
            lambda * (detail::dot_d(dx_c, dx_c) + detail::dot_d(dx_p, dx_p));
      } else {
        const Vec diag_b = hessian.B.diagonal();
        const Vec diag_c = hessian.C.diagonal();
        for (Eigen::Index i = 0; i < dx_c.size(); ++i)
          damping_term +=
              lambda *
              static_cast<double>(clamped_curvature(diag_b[i])) *
              static_cast<double>(dx_c[i]) * static_cast<double>(dx_c[i]);
        for (Eigen::Index i = 0; i < dx_p.size(); ++i)
          damping_term +=
              lambda *
              static_cast<double>(clamped_curvature(diag_c[i])) *
              static_cast<double>(dx_p[i]) * static_cast<double>(dx_p[i]);
      }
      const double model_decrease = damping_term + detail::dot_d(dx_c, hessian.v) +
                                    detail::dot_d(dx_p, hessian.w);

      if (model_decrease <= 0) {
        // Stationary up to roundoff: a vanishing step is convergence, not a
        // failure; anything else is numerical trouble handled as a reject.
        accepted = step_inf < config.step_tol && cost_new <= state.cost;
        if (accepted) cost_new = std::min(cost_new, state.cost);
      } else {
        const double rho = (state.cost - cost_new) / model_decrease;
        accepted = std::isfinite(cost_new) && rho > 0;
        if (accepted) {
          const double shrink = 1.0 - std::pow(2.0 * rho - 1.0, 3.0);
          state.lambda *= std::max(1.0 / 3.0, shrink);
          state.nu = 2.0;
        }
      }
    } catch (const SingularBlockError&) {
      factorization_ok = false;
    } catch (const PcgBreakdownError&) {
      factorization_ok = false;
    }

    state.previous_cost = state.cost;
    if (accepted) {
      state.x_c.swap(trial_x_c);
      state.x_p.swap(trial_x_p);
      state.last_cost_change = state.cost - cost_new;
      state.cost = cost_new;
      state.last_step_inf = step_inf;
      have_system = false;
    } else {
      state.lambda *= state.nu;
      state.nu *= 2.0;
      state.last_cost_change = std::numeric_limits<double>::infinity();
      state.last_step_inf = std::numeric_limits<double>::infinity();
    }
    state.last_accepted = accepted;
    ++state.iteration;

    IterationRecord record;
    record.iteration = state.iteration;
    record.cost = state.cost;
    record.mse = mse_from_cost(state.cost, num_obs, config.mse);
    record.lambda = lambda;
    record.pcg_iterations = factorization_ok ? pcg_iterations : 0;
    record.accepted = accepted;
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      start_time)
            .count();

    // Share per-worker work tallies so histories are complete on every rank.
    const WorkCounters delta = counters - iteration_start;
    std::vector<double> tallies(2 * static_cast<std::size_t>(k_workers), 0.0);
    tallies[2 * static_cast<std::size_t>(rank)] =
        static_cast<double>(delta.edges_evaluated);
    tallies[2 * static_cast<std::size_t>(rank) + 1] =
        static_cast<double>(delta.edge_block_ops);
    group.allreduce_sum(rank, std::span<double>(tallies.data(), tallies.size()));
    record.worker_edges.resize(k_workers);
    record.worker_block_ops.resize(k_workers);
    for (int r = 0; r < k_workers; ++r) {
      const std::size_t slot = 2 * static_cast<std::size_t>(r);
      record.worker_edges[r] = static_cast<std::uint64_t>(tallies[slot]);
      record.worker_block_ops[r] =
          static_cast<std::uint64_t>(tallies[slot + 1]);
    }
    state.history.push_back(std::move(record));

    if (config.check_rank_identity) {
      std::vector<double> probe(4 * static_cast<std::size_t>(k_workers), 0.0);
      const std::size_t self = 4 * static_cast<std::size_t>(rank);
      probe[self] = state.cost;
      probe[self + 1] = state.lambda;
      probe[self + 2] = static_cast<double>(
          state.x_c.size() ? state.x_c.template lpNorm<Eigen::Infinity>()
                           : Scalar(0));
      probe[self + 3] = static_cast<double>(
          state.x_p.size() ? state.x_p.template lpNorm<Eigen::Infinity>()
                           : Scalar(0));
      group.allreduce_sum(rank, std::span<double>(probe.data(), probe.size()));
      for (int r = 0; r < k_workers; ++r) {
        const std::size_t other = 4 * static_cast<std::size_t>(r);
        if (probe[other] != state.cost || probe[other + 1] != state.lambda ||
            probe[other + 2] != probe[self + 2] ||
            probe[other + 3] != probe[self + 3]) {
          throw Error("rank divergence detected at iteration " +
                      std::to_string(state.iteration) + " between ranks " +
                      std::to_string(rank) + " and " + std::to_string(r));
        }
      }
    }

    const ConvergenceDecision decision = check_convergence(state, config);
    if (decision == ConvergenceDecision::converged) {
      state.termination = TerminationReason::converged;
      break;
    }
    if (decision == ConvergenceDecision::stalled) {
      state.termination = TerminationReason::stalled;
      break;
    }
    if (decision == ConvergenceDecision::max_iterations) {
      state.termination = TerminationReason::max_iterations;
      break;
    }
  }
  return state;
}

/// Distributed Levenberg-Marquardt over K in-process workers: partitions the
/// edges, spawns one worker context per rank, runs the collective solve and
/// returns the (rank-identical) final state.
template <typename Scalar>
SolverState<Scalar> lm_solve(const BAProblem<Scalar>& problem,
                             const SolverConfig& config) {
  const auto partitions = partition_edges(problem, config.workers);
  WorkerGroup group(config.workers, config.collective_timeout);
  std::vector<SolverState<Scalar>> states(config.workers);
  run_on_workers(group, [&](int rank) {
    states[rank] =
        lm_solve_rank(problem, config, partitions[rank], group, rank);
  });
  return std::move(states[0]);
}

}  // namespace dba
