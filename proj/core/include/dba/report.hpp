#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "dba/solver.hpp"

namespace dba {

/// Machine-readable record of one solver run: config echo, per-iteration
/// history and the final result. Serialized as a single JSON document with a
/// fixed key order so that parse -> re-emit round-trips byte-identically.
struct RunReport {
  int schema = 1;
  std::string dataset;
  int workers = 1;
  Precision precision = Precision::fp64;
  SolverConfig config;
  std::vector<IterationRecord> iterations;
  double final_cost = 0;
  double final_mse = 0;
  // The same final cost under the other normalization, kept for calibration.
  double final_mse_alternate = 0;
  std::string termination;
};

inline const char* to_string(MseConvention c) {
  return c == MseConvention::half_per_observation ? "2n" : "n";
}

inline MseConvention mse_convention_from_string(const std::string& s) {
  if (s == "2n") return MseConvention::half_per_observation;
  if (s == "n") return MseConvention::per_observation;
  throw InvalidArgumentError("unknown MSE convention '" + s + "' (use n or 2n)");
}

inline const char* to_string(JacobianMode m) {
  return m == JacobianMode::analytic ? "analytic" : "auto";
}

inline JacobianMode jacobian_mode_from_string(const std::string& s) {
  if (s == "auto") return JacobianMode::autodiff;
  if (s == "analytic") return JacobianMode::analytic;
  throw InvalidArgumentError("unknown Jacobian mode '" + s +
                             "' (use auto or analytic)");
}

inline const char* to_string(DampingPolicy p) {
  return p == DampingPolicy::identity ? "identity" : "diagonal";
}

inline DampingPolicy damping_policy_from_string(const std::string& s) {
  if (s == "identity") return DampingPolicy::identity;
  if (s == "diagonal") return DampingPolicy::diag_scaled;
  throw InvalidArgumentError("unknown damping policy '" + s +
                             "' (use identity or diagonal)");
}

template <typename Scalar>
RunReport make_report(const std::string& dataset, const SolverConfig& config,
                      const SolverState<Scalar>& state,
                      std::int64_t num_observations) {
  RunReport r;
  r.dataset = dataset;
  r.workers = config.workers;
  r.precision =
      sizeof(Scalar) == sizeof(float) ? Precision::fp32 : Precision::fp64;
  r.config = config;
  r.iterations = state.history;
  r.final_cost = state.cost;
  r.final_mse = mse_from_cost(state.cost, num_observations, config.mse);
  r.final_mse_alternate = mse_from_cost(
      state.cost, num_observations,
      config.mse == MseConvention::half_per_observation
          ? MseConvention::per_observation
          : MseConvention::half_per_observation);
  r.termination = to_string(state.termination);
  return r;
}

inline nlohmann::ordered_json to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = r.schema;
  j["dataset"] = r.dataset;
  j["workers"] = r.workers;
  j["precision"] = to_string(r.precision);
  nlohmann::ordered_json cfg;
  cfg["max_iterations"] = r.config.max_iterations;
  cfg["pcg_tol"] = r.config.pcg_tol;
  cfg["pcg_max_iters"] = r.config.pcg_max_iters;
  cfg["lambda0"] = r.config.lambda0;
  cfg["lambda_max"] = r.config.lambda_max;
  cfg["rel_tol"] = r.config.rel_tol;
  cfg["step_tol"] = r.config.step_tol;
  cfg["damping"] = to_string(r.config.damping);
  cfg["mse_convention"] = to_string(r.config.mse);
  cfg["jacobian"] = to_string(r.config.jacobian);
  j["config"] = cfg;
  nlohmann::ordered_json iters = nlohmann::ordered_json::array();
  for (const IterationRecord& it : r.iterations) {
    nlohmann::ordered_json ji;
    ji["iteration"] = it.iteration;
    ji["cost"] = it.cost;
    ji["mse"] = it.mse;
    ji["lambda"] = it.lambda;
    ji["pcg_iterations"] = it.pcg_iterations;
    ji["accepted"] = it.accepted;
    ji["wall_seconds"] = it.wall_seconds;
    ji["worker_edges"] = it.worker_edges;
    ji["worker_block_ops"] = it.worker_block_ops;
    iters.push_back(std::move(ji));
  }
  j["iterations"] = std::move(iters);
  j["final_cost"] = r.final_cost;
  j["final_mse"] = r.final_mse;
  j["final_mse_alternate"] = r.final_mse_alternate;
  j["termination"] = r.termination;
  return j;
}

inline RunReport report_from_json(const nlohmann::ordered_json& j) {
  RunReport r;
  r.schema = j.at("schema").get<int>();
  if (r.schema != 1)
    throw ParseError("unsupported report schema " + std::to_string(r.schema),
                     0);
  r.dataset = j.at("dataset").get<std::string>();
  r.workers = j.at("workers").get<int>();
  r.precision = j.at("precision").get<std::string>() == "fp32"
                    ? Precision::fp32
                    : Precision::fp64;
  const auto& cfg = j.at("config");
  r.config.workers = r.workers;
  r.config.max_iterations = cfg.at("max_iterations").get<int>();
  r.config.pcg_tol = cfg.at("pcg_tol").get<double>();
  r.config.pcg_max_iters = cfg.at("pcg_max_iters").get<int>();
  r.config.lambda0 = cfg.at("lambda0").get<double>();
  r.config.lambda_max = cfg.at("lambda_max").get<double>();
  r.config.rel_tol = cfg.at("rel_tol").get<double>();
  r.config.step_tol = cfg.at("step_tol").get<double>();
  r.config.damping = damping_policy_from_string(cfg.at("damping"));
  r.config.mse = mse_convention_from_string(cfg.at("mse_convention"));
  r.config.jacobian = jacobian_mode_from_string(cfg.at("jacobian"));
  for (const auto& ji : j.at("iterations")) {
    IterationRecord it;
    it.iteration = ji.at("iteration").get<int>();
    it.cost = ji.at("cost").get<double>();
    it.mse = ji.at("mse").get<double>();
    it.lambda = ji.at("lambda").get<double>();
    it.pcg_iterations = ji.at("pcg_iterations").get<int>();
    it.accepted = ji.at("accepted").get<bool>();
    it.wall_seconds = ji.at("wall_seconds").get<double>();
    it.worker_edges = ji.at("worker_edges").get<std::vector<std::uint64_t>>();
    it.worker_block_ops =
        ji.at("worker_block_ops").get<std::vector<std::uint64_t>>();
    r.iterations.push_back(std::move(it));
  }
  r.final_cost = j.at("final_cost").get<double>();
  r.final_mse = j.at("final_mse").get<double>();
  r.final_mse_alternate = j.at("final_mse_alternate").get<double>();
  r.termination = j.at("termination").get<std::string>();
  return r;
}

inline std::string serialize_report(const RunReport& r) {
  return to_json(r).dump(2) + "\n";
}

}  // namespace dba
