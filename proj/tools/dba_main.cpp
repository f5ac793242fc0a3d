#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "dba/bal_io.hpp"
#include "dba/report.hpp"
#include "dba/solver.hpp"
#include "dba/synthetic.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitSolverFatal = 3;

struct SolveArgs {
  std::string input;
  std::string output;
  std::string precision = "fp64";
  std::string mse_convention = "2n";
  std::string damping = "diagonal";
  std::string jacobian = "auto";
  int workers = 1;
  int max_iters = 50;
  double pcg_tol = 1e-6;
  int pcg_max_iters = 500;
  double lambda0 = 1e-4;
  double rel_tol = 1e-6;
  double step_tol = 1e-8;
  int log_every = 1;
};

void write_report(const dba::RunReport& report, const std::string& path) {
  const std::string text = dba::serialize_report(report);
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report to " + path);
  out << text;
}

template <typename Scalar>
int run_solve(const SolveArgs& args) {
  dba::BAProblem<Scalar> problem;
  try {
    std::ifstream in(args.input);
    if (!in) {
      std::cerr << "error: cannot open " << args.input << "\n";
      return kExitUsage;
    }
    std::vector<std::string> warnings;
    problem = dba::parse_bal<Scalar>(in, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  } catch (const dba::ParseError& e) {
    std::cerr << "error: " << args.input << ": " << e.what() << "\n";
    return kExitUsage;
  }

  dba::SolverConfig config;
  config.workers = args.workers;
  config.max_iterations = args.max_iters;
  config.pcg_tol = args.pcg_tol;
  config.pcg_max_iters = args.pcg_max_iters;
  config.lambda0 = args.lambda0;
  config.rel_tol = args.rel_tol;
  config.step_tol = args.step_tol;
  config.mse = dba::mse_convention_from_string(args.mse_convention);
  config.damping = dba::damping_policy_from_string(args.damping);
  config.jacobian = dba::jacobian_mode_from_string(args.jacobian);

  const std::string dataset =
      std::filesystem::path(args.input).stem().string();
  std::cerr << dataset << ": " << problem.num_cameras() << " cameras, "
            << problem.num_points() << " points, "
            << problem.num_observations() << " observations, K="
            << config.workers << ", " << dba::to_string(
                   sizeof(Scalar) == 4 ? dba::Precision::fp32
                                       : dba::Precision::fp64)
            << "\n";

  dba::SolverState<Scalar> state;
  try {
    state = dba::lm_solve(problem, config);
  } catch (const std::exception& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    dba::RunReport partial = dba::make_report<Scalar>(
        dataset, config, dba::SolverState<Scalar>{},
        problem.num_observations());
    partial.termination = std::string("fatal: ") + e.what();
    try {
      write_report(partial, args.output);
    } catch (const std::exception& io) {
      std::cerr << "error: " << io.what() << "\n";
    }
    return kExitSolverFatal;
  }

  for (const auto& rec : state.history) {
    if (args.log_every > 0 && (rec.iteration % args.log_every == 0 ||
                               rec.iteration == state.iteration)) {
      std::cerr << "iter " << rec.iteration << (rec.accepted ? "  " : " r")
                << "  cost " << rec.cost << "  mse " << rec.mse << "  lambda "
                << rec.lambda << "  pcg " << rec.pcg_iterations << "  t "
                << rec.wall_seconds << "s\n";
    }
  }
  std::cerr << dba::to_string(state.termination) << " after "
            << state.iteration << " iterations, final mse "
            << dba::mse_from_cost(state.cost, problem.num_observations(),
                                  config.mse)
            << "\n";

  const dba::RunReport report =
      dba::make_report(dataset, config, state, problem.num_observations());
  try {
    write_report(report, args.output);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return state.termination == dba::TerminationReason::stalled
             ? kExitSolverFatal
             : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "dba: multi-worker bundle adjustment on BAL problems\n"
      "Solves with distributed Schur elimination + PCG inside a "
      "Levenberg-Marquardt loop; K in-process workers reproduce the "
      "single-worker result."};
  app.require_subcommand(1);

  SolveArgs solve_args;
  CLI::App* solve = app.add_subcommand("solve", "solve a BAL problem file");
  solve->add_option("--input", solve_args.input, "BAL problem file")
      ->required();
  solve->add_option("--workers", solve_args.workers,
                    "number of in-process workers (K)");
  solve->add_option("--precision", solve_args.precision, "fp32 or fp64")
      ->check(CLI::IsMember({"fp32", "fp64"}));
  solve->add_option("--max-iters", solve_args.max_iters,
                    "outer iteration cap");
  solve->add_option("--pcg-tol", solve_args.pcg_tol,
                    "relative PCG residual tolerance");
  solve->add_option("--pcg-max-iters", solve_args.pcg_max_iters,
                    "PCG iteration cap");
  solve->add_option("--lambda0", solve_args.lambda0, "initial LM damping");
  solve->add_option("--rel-tol", solve_args.rel_tol,
                    "relative cost-change convergence tolerance");
  solve->add_option("--step-tol", solve_args.step_tol,
                    "step infinity-norm convergence tolerance");
  solve->add_option("--mse-convention", solve_args.mse_convention,
                    "mean-squared-error normalization: 2n (cost/2N) or n "
                    "(cost/N)")
      ->check(CLI::IsMember({"n", "2n"}));
  solve->add_option("--damping", solve_args.damping,
                    "LM damping policy: identity or diagonal")
      ->check(CLI::IsMember({"identity", "diagonal"}));
  solve->add_option("--jacobian", solve_args.jacobian,
                    "Jacobian mode: auto (forward-mode jets) or analytic")
      ->check(CLI::IsMember({"auto", "analytic"}));
  solve->add_option("--output", solve_args.output,
                    "write the JSON run report here (default: stdout)");
  solve->add_option("--log-every", solve_args.log_every,
                    "print every Nth iteration (0 silences the log)");

  dba::SyntheticOptions gen_opts;
  double gen_scale = 1.0;
  std::string gen_output;
  bool counts_set[3] = {false, false, false};
  CLI::App* generate = app.add_subcommand(
      "generate", "emit a synthetic ring dataset as a BAL file");
  generate->add_option("--cameras", gen_opts.cameras, "camera count")
      ->each([&](const std::string&) { counts_set[0] = true; });
  generate->add_option("--points", gen_opts.points, "point count")
      ->each([&](const std::string&) { counts_set[1] = true; });
  generate
      ->add_option("--obs-per-point", gen_opts.obs_per_point,
                   "observing cameras per point")
      ->each([&](const std::string&) { counts_set[2] = true; });
  generate->add_option("--seed", gen_opts.seed, "RNG seed");
  generate->add_option(
      "--scale", gen_scale,
      "scale the default full-size counts (20000/80000/1000) by this factor; "
      "explicit count flags win");
  generate->add_option("--output", gen_output,
                       "output BAL file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (solve->parsed()) {
      return solve_args.precision == "fp32" ? run_solve<float>(solve_args)
                                            : run_solve<double>(solve_args);
    }
    // generate
    auto scaled = [&](std::int32_t full) {
      return std::max<std::int32_t>(
          1, static_cast<std::int32_t>(full * gen_scale));
    };
    if (!counts_set[0]) gen_opts.cameras = scaled(20000);
    if (!counts_set[1]) gen_opts.points = scaled(80000);
    if (!counts_set[2]) gen_opts.obs_per_point = scaled(1000);
    const auto problem = dba::generate_synthetic(gen_opts);
    if (gen_output.empty()) {
      dba::serialize_bal(problem, std::cout);
    } else {
      std::ofstream out(gen_output);
      if (!out) {
        std::cerr << "error: cannot write " << gen_output << "\n";
        return kExitUsage;
      }
      dba::serialize_bal(problem, out);
    }
    std::cerr << "generated " << gen_opts.cameras << " cameras, "
              << gen_opts.points << " points, "
              << dba::synthetic_observation_count(gen_opts)
              << " observations (seed " << gen_opts.seed << ")\n";
    return 0;
  } catch (const dba::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitSolverFatal;
  }
}
