#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "dba/bal_io.hpp"
#include "dba/report.hpp"
#include "dba/synthetic.hpp"

using namespace dba;

TEST_CASE("generator honors requested counts") {
  SyntheticOptions opt;
  opt.cameras = 20;
  opt.points = 80;
  opt.obs_per_point = 10;
  opt.seed = 1;
  const auto problem = generate_synthetic(opt);
  CHECK(problem.num_cameras() == 20);
  CHECK(problem.num_points() == 80);
  CHECK(problem.num_observations() == 800);
  CHECK(problem.validate().empty());

  std::ostringstream out;
  serialize_bal(problem, out);
  CHECK(out.str().substr(0, out.str().find('\n')) == "20 80 800");
}

TEST_CASE("full-scale parameters imply the expected header counts") {
  SyntheticOptions opt;  // defaults are the full-scale recipe
  CHECK(opt.cameras == 20000);
  CHECK(opt.points == 80000);
  CHECK(opt.obs_per_point == 1000);
  CHECK(synthetic_observation_count(opt) == 80000000);
}

TEST_CASE("generator is deterministic per seed") {
  SyntheticOptions opt;
  opt.cameras = 10;
  opt.points = 30;
  opt.obs_per_point = 5;
  opt.seed = 42;
  std::ostringstream a, b;
  serialize_bal(generate_synthetic(opt), a);
  serialize_bal(generate_synthetic(opt), b);
  CHECK(a.str() == b.str());

  opt.seed = 43;
  std::ostringstream c;
  serialize_bal(generate_synthetic(opt), c);
  CHECK(a.str() != c.str());
}

TEST_CASE("generator output parses back with matching counts") {
  SyntheticOptions opt;
  opt.cameras = 7;
  opt.points = 15;
  opt.obs_per_point = 3;
  opt.seed = 9;
  const auto problem = generate_synthetic(opt);
  std::ostringstream out;
  serialize_bal(problem, out);
  std::istringstream in(out.str());
  std::vector<std::string> warnings;
  const auto parsed = parse_bal<double>(in, &warnings);
  CHECK(parsed.num_cameras() == 7);
  CHECK(parsed.num_points() == 15);
  CHECK(parsed.num_observations() == 45);
  CHECK(warnings.empty());
}

TEST_CASE("generator rejects impossible observation counts") {
  SyntheticOptions opt;
  opt.cameras = 5;
  opt.points = 10;
  opt.obs_per_point = 6;
  CHECK_THROWS_AS(generate_synthetic(opt), InvalidArgumentError);
}

TEST_CASE("ground truth projected through noisy cameras has nonzero residuals") {
  SyntheticOptions opt;
  opt.cameras = 12;
  opt.points = 24;
  opt.obs_per_point = 4;
  const auto problem = generate_synthetic(opt);
  CHECK(total_cost(problem) > 0.0);
}

namespace {

RunReport sample_report() {
  SyntheticOptions opt;
  opt.cameras = 6;
  opt.points = 12;
  opt.obs_per_point = 3;
  const auto problem = generate_synthetic(opt);
  SolverConfig config;
  config.max_iterations = 4;
  const auto state = lm_solve(problem, config);
  return make_report("sample", config, state, problem.num_observations());
}

}  // namespace

TEST_CASE("report JSON round-trips byte-identically") {
  const RunReport report = sample_report();
  const std::string once = serialize_report(report);
  const RunReport parsed =
      report_from_json(nlohmann::ordered_json::parse(once));
  const std::string twice = serialize_report(parsed);
  CHECK(once == twice);
  CHECK(parsed.schema == 1);
  CHECK(parsed.dataset == "sample");
  CHECK(parsed.iterations.size() == report.iterations.size());
}

TEST_CASE("report MSE matches the final state under both conventions") {
  SyntheticOptions opt;
  opt.cameras = 6;
  opt.points = 12;
  opt.obs_per_point = 3;
  const auto problem = generate_synthetic(opt);
  SolverConfig config;
  config.max_iterations = 3;
  const auto state = lm_solve(problem, config);
  const auto report =
      make_report("x", config, state, problem.num_observations());
  CHECK(report.final_mse ==
        mse_from_cost(state.cost, problem.num_observations(),
                      MseConvention::half_per_observation));
  CHECK(report.final_mse_alternate ==
        mse_from_cost(state.cost, problem.num_observations(),
                      MseConvention::per_observation));
  CHECK(report.final_mse == report.iterations.back().mse);
}
