#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dba/edge_eval.hpp"
#include "dba/jet_vector.hpp"
#include "oracles.hpp"

using namespace dba;

namespace {

// Single-element jet helper: value v with gradient row g.
JetVector<double> jet1(double v, std::vector<double> g) {
  JetVector<double> jv(1, static_cast<int>(g.size()));
  jv.values()[0] = v;
  for (std::size_t j = 0; j < g.size(); ++j) jv.grad_lane(j)[0] = g[j];
  return jv;
}

}  // namespace

TEST_CASE("product rule") {
  const auto a = jet1(2.0, {1.0, 0.0});
  const auto b = jet1(3.0, {0.0, 1.0});
  const auto c = a * b;
  CHECK(c.value(0) == 6.0);
  CHECK(c.grad(0, 0) == 3.0);
  CHECK(c.grad(0, 1) == 2.0);
}

TEST_CASE("adding a zero scalar is the identity") {
  const auto a = jet1(1.5, {2.0, -3.0});
  const auto b = a + 0.0;
  CHECK(b.value(0) == a.value(0));
  CHECK(b.grad(0, 0) == a.grad(0, 0));
  CHECK(b.grad(0, 1) == a.grad(0, 1));
}

TEST_CASE("quotient rule") {
  const auto a = jet1(6.0, {1.0, 0.0});
  const auto b = jet1(2.0, {0.0, 1.0});
  const auto c = a / b;
  CHECK(c.value(0) == 3.0);
  CHECK(c.grad(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.grad(0, 1) == doctest::Approx(-1.5).epsilon(1e-15));
}

TEST_CASE("sqrt chain rule, involution of negation, domain errors") {
  const auto a = jet1(4.0, {4.0});
  const auto s = sqrt(a);
  CHECK(s.value(0) == 2.0);
  CHECK(s.grad(0, 0) == 1.0);

  const auto n = -(-a);
  CHECK(n.value(0) == a.value(0));
  CHECK(n.grad(0, 0) == a.grad(0, 0));

  CHECK_THROWS_AS(sqrt(jet1(0.0, {1.0})), InvalidArgumentError);
}

TEST_CASE("shape mismatch and division by zero report useful errors") {
  JetVector<double> a(3, 2), b(4, 2);
  CHECK_THROWS_AS(a + b, ShapeError);

  JetVector<double> num(2, 1), den(2, 1);
  num.values()[0] = 1.0;
  num.values()[1] = 1.0;
  den.values()[0] = 2.0;
  den.values()[1] = 0.0;
  try {
    auto q = num / den;
    FAIL("expected division-by-zero error");
  } catch (const InvalidArgumentError& e) {
    CHECK(std::string(e.what()).find("element 1") != std::string::npos);
  }
}

TEST_CASE("gradient lanes are contiguous, adjacent regions") {
  JetVector<double> jv(5, 3);
  for (int j = 0; j < 3; ++j) {
    auto lane = jv.grad_lane(j);
    CHECK(lane.size() == 5);
    if (j > 0) CHECK(jv.grad_lane(j - 1).data() + 5 == lane.data());
  }
}

TEST_CASE("gradients are linear in the seed directions") {
  // Evaluating with seeds e0 and e1 and combining a*g0 + b*g1 must equal
  // evaluating with the combined seed a*e0 + b*e1.
  auto build = [](double v, double s0, double s1) {
    JetVector<double> jv(1, 2);
    jv.values()[0] = v;
    jv.grad_lane(0)[0] = s0;
    jv.grad_lane(1)[0] = s1;
    return jv;
  };
  const double a = 0.7, b = -2.3;
  auto f = [](const JetVector<double>& x, const JetVector<double>& y) {
    return (x * y + x) / (y + 5.0);
  };
  const auto fx = f(build(1.3, 1.0, 0.0), build(0.4, 0.0, 1.0));
  const auto combined = f(build(1.3, a, 0.0), build(0.4, 0.0, b));
  CHECK(combined.grad(0, 0) ==
        doctest::Approx(a * fx.grad(0, 0)).epsilon(1e-14));
  CHECK(combined.grad(0, 1) ==
        doctest::Approx(b * fx.grad(0, 1)).epsilon(1e-14));
}

namespace {

std::array<JetVector<double>, 3> seeded_triple(const Eigen::Vector3d& v,
                                               int first_lane, int d) {
  std::array<JetVector<double>, 3> out;
  for (int i = 0; i < 3; ++i) {
    out[i] = JetVector<double>(1, d);
    out[i].values()[0] = v[i];
    out[i].grad_lane(first_lane + i)[0] = 1.0;
  }
  return out;
}

}  // namespace

TEST_CASE("rotation: identity and quarter turn") {
  const auto aa = seeded_triple(Eigen::Vector3d::Zero(), 0, 6);
  const auto x = seeded_triple(Eigen::Vector3d(0.3, -0.7, 1.1), 3, 6);
  const auto rotated = rotate_angle_axis(aa, x);
  CHECK(rotated[0].value(0) == 0.3);
  CHECK(rotated[1].value(0) == -0.7);
  CHECK(rotated[2].value(0) == 1.1);

  const auto quarter =
      seeded_triple(Eigen::Vector3d(0, 0, EIGEN_PI / 2), 0, 6);
  const auto ex = seeded_triple(Eigen::Vector3d(1, 0, 0), 3, 6);
  const auto turned = rotate_angle_axis(quarter, ex);
  CHECK(std::abs(turned[0].value(0) - 0.0) < 1e-12);
  CHECK(std::abs(turned[1].value(0) - 1.0) < 1e-12);
  CHECK(std::abs(turned[2].value(0) - 0.0) < 1e-12);
}

TEST_CASE("rotation gradients match central finite differences") {
  std::mt19937 rng(1234);
  std::uniform_real_distribution<double> dist(-1.5, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Vector3d aa(dist(rng), dist(rng), dist(rng));
    Eigen::Vector3d x(dist(rng), dist(rng), dist(rng));
    if (trial % 7 == 0) aa *= 1e-8;  // exercise the small-angle branch

    const auto jets =
        rotate_angle_axis(seeded_triple(aa, 0, 6), seeded_triple(x, 3, 6));
    for (int out = 0; out < 3; ++out) {
      for (int in = 0; in < 6; ++in) {
        Eigen::Matrix<double, 6, 1> params;
        params << aa, x;
        const double h = 1e-7 * std::max(1.0, std::abs(params[in]));
        Eigen::Matrix<double, 6, 1> hi = params, lo = params;
        hi[in] += h;
        lo[in] -= h;
        const Eigen::Vector3d fhi = angle_axis_rotate<double>(
            hi.head<3>(), hi.tail<3>());
        const Eigen::Vector3d flo = angle_axis_rotate<double>(
            lo.head<3>(), lo.tail<3>());
        const double fd = (fhi[out] - flo[out]) / (2 * h);
        const double ad = jets[out].grad(0, in);
        CHECK(std::abs(ad - fd) / std::max(1.0, std::abs(fd)) < 1e-6);
      }
    }
  }
}

TEST_CASE("batched evaluation at a zero-residual configuration") {
  BAProblem<double> problem;
  CameraState<double> cam;
  cam.focal = 2.0;
  problem.add_node(cam);
  PointState<double> pt;
  pt.position = Eigen::Vector3d(0.5, -0.25, -1.0);
  problem.add_node(pt);
  Observation<double> obs;
  obs.pixel = residual<double>(cam, pt, Eigen::Vector2d::Zero());
  problem.add_edge(obs);

  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const auto batch = evaluate_edges<double>(
      problem, parts[0], {x_c.data(), std::size_t(x_c.size())},
      {x_p.data(), std::size_t(x_p.size())});
  CHECK(batch.residual(0).norm() < 1e-15);
  CHECK(batch.all_finite());
}

TEST_CASE("batched Jacobians match finite differences of the scalar model") {
  oracle::ProblemFactory factory(77);
  auto problem = factory.random_problem(4, 7, 25);
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const auto batch = evaluate_edges<double>(
      problem, parts[0], {x_c.data(), std::size_t(x_c.size())},
      {x_p.data(), std::size_t(x_p.size())});

  for (std::int64_t e = 0; e < batch.size(); ++e) {
    const auto& o = problem.observation(e);
    // Residuals agree with the scalar path.
    const Eigen::Vector2d scalar = residual<double>(
        problem.camera(o.camera_id), problem.point(o.point_id), o.pixel);
    CHECK((batch.residual(e) - scalar).norm() /
              std::max(1.0, scalar.norm()) <
          1e-13);

    Eigen::Matrix<double, 2, 9> fd_cam;
    Eigen::Matrix<double, 2, 3> fd_pt;
    oracle::finite_difference_jacobians(problem.camera(o.camera_id),
                                        problem.point(o.point_id), o.pixel,
                                        fd_cam, fd_pt);
    const auto jc = batch.camera_jacobian(e);
    const auto jp = batch.point_jacobian(e);
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 9; ++c)
        CHECK(std::abs(jc(r, c) - fd_cam(r, c)) /
                  std::max(1.0, std::abs(fd_cam(r, c))) <
              1e-6);
      for (int c = 0; c < 3; ++c)
        CHECK(std::abs(jp(r, c) - fd_pt(r, c)) /
                  std::max(1.0, std::abs(fd_pt(r, c))) <
              1e-6);
    }
  }
}

TEST_CASE("batch cost agrees with the scalar total and degenerate edges name ids") {
  oracle::ProblemFactory factory(101);
  auto problem = factory.random_problem(5, 9, 40);
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const auto batch = evaluate_edges<double>(
      problem, parts[0], {x_c.data(), std::size_t(x_c.size())},
      {x_p.data(), std::size_t(x_p.size())});
  double batch_cost = 0;
  for (std::int64_t e = 0; e < batch.size(); ++e)
    batch_cost += batch.residual(e).squaredNorm();
  const double scalar_cost = total_cost(problem);
  CHECK(std::abs(batch_cost - scalar_cost) / scalar_cost < 1e-10);
}

TEST_CASE("per-edge results are identical across partition boundaries") {
  oracle::ProblemFactory factory(303);
  auto problem = factory.random_problem(4, 6, 21);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const std::span<const double> xc{x_c.data(), std::size_t(x_c.size())};
  const std::span<const double> xp{x_p.data(), std::size_t(x_p.size())};

  const auto whole = partition_edges(problem, 1);
  const auto reference = evaluate_edges<double>(problem, whole[0], xc, xp);

  for (int k : {2, 3, 4}) {
    for (const auto& part : partition_edges(problem, k)) {
      const auto piece = evaluate_edges<double>(problem, part, xc, xp);
      for (std::size_t i = 0; i < part.edge_ids.size(); ++i) {
        const std::int64_t e = part.edge_ids[i];
        // Bit-for-bit: the same elementwise operations run per edge
        // regardless of the batch it lands in.
        CHECK(piece.residual(i) == reference.residual(e));
        CHECK(piece.camera_jacobian(i) == reference.camera_jacobian(e));
        CHECK(piece.point_jacobian(i) == reference.point_jacobian(e));
      }
    }
  }
}

TEST_CASE("evaluator reports the global edge id on degenerate depth") {
  BAProblem<double> problem;
  problem.add_node(CameraState<double>{});
  PointState<double> good;
  good.position = Eigen::Vector3d(0, 0, -1);
  problem.add_node(good);
  PointState<double> bad;
  bad.position = Eigen::Vector3d(0, 1, 0);
  problem.add_node(bad);
  for (std::int32_t pt : {0, 0, 1}) {
    Observation<double> o;
    o.point_id = pt;
    problem.add_edge(o);
  }
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  try {
    evaluate_edges<double>(problem, parts[0],
                           {x_c.data(), std::size_t(x_c.size())},
                           {x_p.data(), std::size_t(x_p.size())});
    FAIL("expected DegenerateDepthError");
  } catch (const DegenerateDepthError& e) {
    CHECK(e.edge_id() == 2);
  }
}

TEST_CASE("analytic Jacobians agree with the auto-diff path") {
  oracle::ProblemFactory factory(909);
  auto problem = factory.random_problem(5, 8, 30);
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const std::span<const double> xc{x_c.data(), std::size_t(x_c.size())};
  const std::span<const double> xp{x_p.data(), std::size_t(x_p.size())};

  EdgeEvaluator<double> autodiff(problem, parts[0], JacobianMode::autodiff);
  EdgeEvaluator<double> analytic(problem, parts[0], JacobianMode::analytic);
  const auto& a = autodiff.linearize(xc, xp);
  // linearize() returns a reference into the evaluator; copy before running
  // the other path.
  EdgeJacobianBatch<double> ad{a.rx, a.ry};
  const auto& an = analytic.linearize(xc, xp);

  for (std::int64_t e = 0; e < ad.size(); ++e) {
    CHECK((ad.residual(e) - an.residual(e)).norm() <=
          1e-12 * std::max(1.0, ad.residual(e).norm()));
    const auto jc_a = ad.camera_jacobian(e);
    const auto jc_n = an.camera_jacobian(e);
    CHECK((jc_a - jc_n).norm() <= 1e-12 * std::max(1.0, jc_a.norm()));
    const auto jp_a = ad.point_jacobian(e);
    const auto jp_n = an.point_jacobian(e);
    CHECK((jp_a - jp_n).norm() <= 1e-12 * std::max(1.0, jp_a.norm()));
  }

  // Small-angle branch parity.
  BAProblem<double> tiny;
  auto cam = factory.random_camera();
  cam.rotation *= 1e-8;
  tiny.add_node(cam);
  tiny.add_node(factory.random_point());
  Observation<double> obs;
  obs.pixel = factory.random_pixel();
  tiny.add_edge(obs);
  const auto tparts = partition_edges(tiny, 1);
  const auto txc = pack_cameras(tiny);
  const auto txp = pack_points(tiny);
  EdgeEvaluator<double> tad(tiny, tparts[0], JacobianMode::autodiff);
  EdgeEvaluator<double> tan(tiny, tparts[0], JacobianMode::analytic);
  const std::span<const double> sxc{txc.data(), std::size_t(txc.size())};
  const std::span<const double> sxp{txp.data(), std::size_t(txp.size())};
  const auto& ta = tad.linearize(sxc, sxp);
  EdgeJacobianBatch<double> ta_copy{ta.rx, ta.ry};
  const auto& tn = tan.linearize(sxc, sxp);
  CHECK((ta_copy.camera_jacobian(0) - tn.camera_jacobian(0)).norm() <=
        1e-12 * std::max(1.0, ta_copy.camera_jacobian(0).norm()));
}

TEST_CASE("fp32 rotation stays accurate through the small-angle branch") {
  std::mt19937 rng(555);
  std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector3f aa(dist(rng), dist(rng), dist(rng));
    if (trial % 3 == 0) aa *= 1e-4f;
    Eigen::Vector3f x(dist(rng), dist(rng), dist(rng));
    const Eigen::Vector3f ours = angle_axis_rotate<float>(aa, x);
    const Eigen::Vector3d ref =
        angle_axis_rotate<double>(aa.cast<double>(), x.cast<double>());
    CHECK((ours.cast<double>() - ref).norm() <=
          1e-5 * std::max(1.0, ref.norm()));
  }
}
