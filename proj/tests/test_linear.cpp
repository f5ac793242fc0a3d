#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <random>

#include "dba/block_matrix.hpp"
#include "oracles.hpp"

using namespace dba;

namespace {

std::span<const double> cspan(const Eigen::VectorXd& v) {
  return {v.data(), std::size_t(v.size())};
}
std::span<double> mspan(Eigen::VectorXd& v) {
  return {v.data(), std::size_t(v.size())};
}

struct Assembled {
  BAProblem<double> problem;
  std::vector<EdgePartition> parts;
  PartitionedHessian<double> hessian;
};

Assembled assemble(unsigned seed, int cams, int pts, int edges, int k = 1,
                   int rank = 0) {
  oracle::ProblemFactory factory(seed);
  Assembled a{factory.random_problem(cams, pts, edges), {}, {}};
  a.parts = partition_edges(a.problem, k);
  const auto x_c = pack_cameras(a.problem);
  const auto x_p = pack_points(a.problem);
  a.hessian = assemble_local<double>(a.problem, a.parts[rank],
                                     {x_c.data(), std::size_t(x_c.size())},
                                     {x_p.data(), std::size_t(x_p.size())});
  return a;
}

}  // namespace

TEST_CASE("single-edge assembly puts a Gram block in B only") {
  // One edge whose camera Jacobian is an identity pad and point Jacobian is
  // zero: B gets the Gram block, E and w stay zero. Easiest to check through
  // the dense oracle on a real edge instead of synthetic Jacobians: a zero
  // residual still produces nonzero J, so check E = Jc' Jp structure instead.
  auto a = assemble(41, 1, 1, 1);
  const auto x_c = pack_cameras(a.problem);
  const auto x_p = pack_points(a.problem);
  EdgeEvaluator<double> ev(a.problem, a.parts[0]);
  const auto& batch = ev.linearize({x_c.data(), std::size_t(x_c.size())},
                                   {x_p.data(), std::size_t(x_p.size())});
  const auto jc = batch.camera_jacobian(0);
  const auto jp = batch.point_jacobian(0);
  CHECK((a.hessian.B.block(0) - jc.transpose() * jc).norm() < 1e-12);
  CHECK((a.hessian.C.block(0) - jp.transpose() * jp).norm() < 1e-12);
  CHECK((a.hessian.E.block(0) - jc.transpose() * jp).norm() < 1e-12);
}

TEST_CASE("two edges on one camera add their Gram blocks") {
  BAProblem<double> problem;
  oracle::ProblemFactory factory(43);
  problem.add_node(factory.random_camera());
  problem.add_node(factory.random_point());
  problem.add_node(factory.random_point());
  for (std::int32_t p : {0, 1}) {
    Observation<double> o;
    o.point_id = p;
    o.pixel = factory.random_pixel();
    problem.add_edge(o);
  }
  const auto parts = partition_edges(problem, 1);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const std::span<const double> xc{x_c.data(), std::size_t(x_c.size())};
  const std::span<const double> xp{x_p.data(), std::size_t(x_p.size())};
  const auto h = assemble_local<double>(problem, parts[0], xc, xp);

  EdgeEvaluator<double> ev(problem, parts[0]);
  const auto& batch = ev.linearize(xc, xp);
  Eigen::Matrix<double, 9, 9> expected =
      batch.camera_jacobian(0).transpose() * batch.camera_jacobian(0) +
      batch.camera_jacobian(1).transpose() * batch.camera_jacobian(1);
  CHECK((h.B.block(0) - expected).norm() / expected.norm() < 1e-14);
}

TEST_CASE("assembly matches the dense Gram oracle") {
  auto a = assemble(47, 3, 4, 14);
  const auto x_c = pack_cameras(a.problem);
  const auto x_p = pack_points(a.problem);
  EdgeEvaluator<double> ev(a.problem, a.parts[0]);
  const auto& batch = ev.linearize({x_c.data(), std::size_t(x_c.size())},
                                   {x_p.data(), std::size_t(x_p.size())});

  const Eigen::MatrixXd j = oracle::dense_jacobian(batch, a.parts[0], a.problem);
  const Eigen::VectorXd r = oracle::dense_residual(batch, a.parts[0], a.problem);
  const Eigen::MatrixXd gram = j.transpose() * j;
  const Eigen::VectorXd rhs = -j.transpose() * r;
  const int cam_dim = 9 * a.problem.num_cameras();
  const int pt_dim = 3 * a.problem.num_points();

  const Eigen::MatrixXd b = oracle::dense_block_diagonal(a.hessian.B);
  const Eigen::MatrixXd c = oracle::dense_block_diagonal(a.hessian.C);
  const Eigen::MatrixXd e = oracle::dense_coupling(a.hessian.E);

  CHECK((gram.topLeftCorner(cam_dim, cam_dim) - b).norm() /
            std::max(1.0, b.norm()) <
        1e-12);
  CHECK((gram.bottomRightCorner(pt_dim, pt_dim) - c).norm() /
            std::max(1.0, c.norm()) <
        1e-12);
  CHECK((gram.topRightCorner(cam_dim, pt_dim) - e).norm() /
            std::max(1.0, e.norm()) <
        1e-12);
  CHECK((rhs.head(cam_dim) - a.hessian.v).norm() /
            std::max(1.0, a.hessian.v.norm()) <
        1e-12);
  CHECK((rhs.tail(pt_dim) - a.hessian.w).norm() /
            std::max(1.0, a.hessian.w.norm()) <
        1e-12);
}

TEST_CASE("assembled diagonal blocks are symmetric PSD") {
  auto a = assemble(53, 4, 6, 20);
  for (std::int64_t i = 0; i < a.hessian.B.blocks(); ++i) {
    const auto b = a.hessian.B.block(i);
    CHECK((b - b.transpose()).norm() <= 1e-10 * std::max(1.0, b.norm()));
  }
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> dist(-1, 1);
  Eigen::VectorXd x(a.hessian.B.dim());
  for (int t = 0; t < 10; ++t) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = dist(rng);
    Eigen::VectorXd y(x.size());
    a.hessian.B.apply(cspan(x), mspan(y));
    CHECK(x.dot(y) >= -1e-10 * x.squaredNorm());
  }
}

TEST_CASE("partitioned assembly sums to the single-partition assembly") {
  oracle::ProblemFactory factory(59);
  auto problem = factory.random_problem(4, 7, 23);
  const auto x_c = pack_cameras(problem);
  const auto x_p = pack_points(problem);
  const std::span<const double> xc{x_c.data(), std::size_t(x_c.size())};
  const std::span<const double> xp{x_p.data(), std::size_t(x_p.size())};

  const auto whole = partition_edges(problem, 1);
  const auto reference = assemble_local<double>(problem, whole[0], xc, xp);
  const Eigen::MatrixXd e_ref = oracle::dense_coupling(reference.E);

  for (int k : {2, 3, 5}) {
    Eigen::MatrixXd b_sum = Eigen::MatrixXd::Zero(reference.B.dim(),
                                                  reference.B.dim());
    Eigen::MatrixXd c_sum =
        Eigen::MatrixXd::Zero(reference.C.dim(), reference.C.dim());
    Eigen::MatrixXd e_sum =
        Eigen::MatrixXd::Zero(reference.E.camera_dim(),
                              reference.E.point_dim());
    Eigen::VectorXd v_sum = Eigen::VectorXd::Zero(reference.v.size());
    Eigen::VectorXd w_sum = Eigen::VectorXd::Zero(reference.w.size());
    for (const auto& part : partition_edges(problem, k)) {
      const auto h = assemble_local<double>(problem, part, xc, xp);
      b_sum += oracle::dense_block_diagonal(h.B);
      c_sum += oracle::dense_block_diagonal(h.C);
      e_sum += oracle::dense_coupling(h.E);
      v_sum += h.v;
      w_sum += h.w;
    }
    CHECK((b_sum - oracle::dense_block_diagonal(reference.B)).norm() /
              b_sum.norm() <
          1e-12);
    CHECK((c_sum - oracle::dense_block_diagonal(reference.C)).norm() /
              c_sum.norm() <
          1e-12);
    CHECK((e_sum - e_ref).norm() / e_ref.norm() < 1e-12);
    CHECK((v_sum - reference.v).norm() / std::max(1.0, reference.v.norm()) <
          1e-12);
    CHECK((w_sum - reference.w).norm() / std::max(1.0, reference.w.norm()) <
          1e-12);
  }
}

TEST_CASE("coupling SpMV against the dense oracle") {
  auto a = assemble(61, 3, 5, 17);
  const Eigen::MatrixXd e = oracle::dense_coupling(a.hessian.E);
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd x(e.rows()), b(e.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = dist(rng);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = dist(rng);

    const Eigen::VectorXd et_x = a.hessian.E.apply_transpose(x);
    CHECK((et_x - e.transpose() * x).norm() /
              std::max(1.0, et_x.norm()) <
          1e-12);
    const Eigen::VectorXd e_b = a.hessian.E.apply(b);
    CHECK((e_b - e * b).norm() / std::max(1.0, e_b.norm()) < 1e-12);

    // Adjointness: (E^T x) . b == x . (E b)
    const double lhs = et_x.dot(b);
    const double rhs = x.dot(e_b);
    CHECK(std::abs(lhs - rhs) <=
          1e-12 * std::max({1.0, std::abs(lhs), std::abs(rhs)}));

    // Gram positivity of E E^T restricted to the camera space.
    const Eigen::VectorXd eet_x = a.hessian.E.apply(et_x);
    CHECK(x.dot(eet_x) >= -1e-10 * x.squaredNorm());
  }

  Eigen::VectorXd zero_b = Eigen::VectorXd::Zero(e.cols());
  CHECK(a.hessian.E.apply(zero_b).norm() == 0.0);

  Eigen::VectorXd wrong = Eigen::VectorXd::Zero(e.rows() + 9);
  Eigen::VectorXd out(e.cols());
  CHECK_THROWS_AS(a.hessian.E.apply_transpose(cspan(wrong), mspan(out)),
                  ShapeError);
  CHECK_THROWS_AS(a.hessian.E.apply(cspan(wrong), mspan(out)), ShapeError);
}

TEST_CASE("SpMV counts the blocks it multiplies") {
  auto a = assemble(67, 3, 5, 17);
  WorkCounters counters;
  Eigen::VectorXd x = Eigen::VectorXd::Ones(a.hessian.E.camera_dim());
  Eigen::VectorXd out(a.hessian.E.point_dim());
  a.hessian.E.apply_transpose(cspan(x), mspan(out), &counters);
  CHECK(counters.edge_block_ops == 17);
}

TEST_CASE("block-diagonal apply and solve") {
  BlockDiagonal<double, 3> d(2);
  d.block(0) = Eigen::Matrix3d::Identity();
  d.block(1) = Eigen::Vector3d(1, 2, 3).asDiagonal();
  Eigen::VectorXd x(6);
  x << 1, 1, 1, 1, 1, 1;
  const Eigen::VectorXd y = d.apply(x);
  CHECK(y.head<3>() == Eigen::Vector3d(1, 1, 1));
  CHECK(y.tail<3>() == Eigen::Vector3d(1, 2, 3));

  BlockDiagonal<double, 3> twos(1);
  twos.block(0) = 2.0 * Eigen::Matrix3d::Identity();
  FactoredBlockDiagonal<double, 3> f;
  f.factor(twos);
  Eigen::VectorXd rhs(3);
  rhs << 2, 4, 6;
  CHECK((f.solve(rhs) - Eigen::Vector3d(1, 2, 3)).norm() < 1e-14);

  CHECK_THROWS_AS(d.apply(rhs), ShapeError);
}

TEST_CASE("random SPD blocks: solve round-trips through apply") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> dist(-1, 1);
  BlockDiagonal<double, 9> d(4);
  for (int i = 0; i < 4; ++i) {
    Eigen::Matrix<double, 9, 9> m;
    for (int r = 0; r < 9; ++r)
      for (int c = 0; c < 9; ++c) m(r, c) = dist(rng);
    d.block(i) = m * m.transpose() + 0.5 * Eigen::Matrix<double, 9, 9>::Identity();
  }
  FactoredBlockDiagonal<double, 9> f;
  f.factor(d);
  Eigen::VectorXd x(d.dim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = dist(rng);
  const Eigen::VectorXd round = d.apply(f.solve(x));
  CHECK((round - x).norm() / x.norm() < 1e-10);
}

TEST_CASE("factorization failure names the offending block") {
  BlockDiagonal<double, 3> d(2);
  d.block(0) = Eigen::Matrix3d::Identity();
  d.block(1) = -Eigen::Matrix3d::Identity();
  FactoredBlockDiagonal<double, 3> f;
  try {
    f.factor(d);
    FAIL("expected SingularBlockError");
  } catch (const SingularBlockError& e) {
    CHECK(e.block_index() == 1);
    CHECK(e.block_size() == 3);
  }
}

TEST_CASE("LM damping policies") {
  BlockDiagonal<double, 3> d(1);
  d.block(0) = Eigen::Vector3d(2, 4, 8).asDiagonal();

  BlockDiagonal<double, 3> out;
  d.damp_into(0.0, DampingPolicy::identity, out);
  CHECK(out.block(0) == d.block(0));

  BlockDiagonal<double, 3> zero(1);
  zero.damp_into(1.0, DampingPolicy::identity, out);
  CHECK(out.block(0) == Eigen::Matrix3d::Identity());

  d.damp_into(0.5, DampingPolicy::diag_scaled, out);
  CHECK(out.block(0) == Eigen::Matrix3d(Eigen::Vector3d(3, 6, 12).asDiagonal()));
}

TEST_CASE("damped PSD blocks become SPD for any positive lambda") {
  std::mt19937 rng(13);
  std::uniform_real_distribution<double> dist(-1, 1);
  BlockDiagonal<double, 3> d(20);
  for (int i = 0; i < 20; ++i) {
    // Rank-deficient PSD blocks built from a single outer product.
    Eigen::Vector3d v(dist(rng), dist(rng), dist(rng));
    d.block(i) = v * v.transpose();
  }
  for (double lambda : {1e-12, 1e-6, 1.0}) {
    BlockDiagonal<double, 3> damped;
    d.damp_into(lambda, DampingPolicy::identity, damped);
    for (int i = 0; i < 20; ++i) {
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(damped.block(i));
      CHECK(eig.eigenvalues().minCoeff() > 0.0);
    }
    FactoredBlockDiagonal<double, 3> f;
    CHECK_NOTHROW(f.factor(damped));
  }
}
