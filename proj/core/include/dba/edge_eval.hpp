#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <vector>

#include "dba/counters.hpp"
#include "dba/jet_vector.hpp"
#include "dba/partition.hpp"
#include "dba/problem.hpp"

namespace dba {

/// Residuals and per-edge local Jacobians for one partition, kept in the SoA
/// layout the jets produce: two residual jets whose 12 gradient lanes are the
/// columns of the 2x9 camera block (lanes 0..8) and the 2x3 point block
/// (lanes 9..11).
template <typename Scalar>
class EdgeJacobianBatch {
 public:
  std::int64_t size() const { return rx.size(); }

  Eigen::Matrix<Scalar, 2, 1> residual(std::int64_t i) const {
    return {rx.value(i), ry.value(i)};
  }
  Eigen::Matrix<Scalar, 2, kCameraParams> camera_jacobian(std::int64_t i) const {
    Eigen::Matrix<Scalar, 2, kCameraParams> j;
    for (int c = 0; c < kCameraParams; ++c) {
      j(0, c) = rx.grad(i, c);
      j(1, c) = ry.grad(i, c);
    }
    return j;
  }
  Eigen::Matrix<Scalar, 2, kPointParams> point_jacobian(std::int64_t i) const {
    Eigen::Matrix<Scalar, 2, kPointParams> j;
    for (int c = 0; c < kPointParams; ++c) {
      j(0, c) = rx.grad(i, kCameraParams + c);
      j(1, c) = ry.grad(i, kCameraParams + c);
    }
    return j;
  }

  /// SoA lane accessors: one contiguous region per (residual row, column).
  std::span<const Scalar> value_lane(int row) const {
    return row == 0 ? rx.values() : ry.values();
  }
  std::span<const Scalar> grad_lane(int row, int column) const {
    return row == 0 ? rx.grad_lane(column) : ry.grad_lane(column);
  }

  bool all_finite() const {
    auto finite = [](std::span<const Scalar> s) {
      for (Scalar v : s)
        if (!std::isfinite(static_cast<double>(v))) return false;
      return true;
    };
    if (!finite(rx.values()) || !finite(ry.values())) return false;
    for (int j = 0; j < kLocalParams; ++j)
      if (!finite(rx.grad_lane(j)) || !finite(ry.grad_lane(j))) return false;
    return true;
  }

  JetVector<Scalar> rx, ry;
};

/// How per-edge Jacobians are produced: forward-mode jets (the default) or
/// hand-derived closed-form derivatives of the same model. Both fill the
/// same batch layout and agree to roundoff; the analytic path skips the
/// 12-lane jet arithmetic.
enum class JacobianMode { autodiff, analytic };

/// Batched evaluation of the BAL reprojection model over one partition's
/// edges. Owns its scratch jets; buffers are sized on the first call and
/// reused across iterations, so steady state does not allocate.
template <typename Scalar>
class EdgeEvaluator {
 public:
  EdgeEvaluator(const BAProblem<Scalar>& problem, const EdgePartition& partition,
                JacobianMode mode = JacobianMode::autodiff)
      : problem_(&problem), partition_(&partition), mode_(mode) {
    const std::int64_t n = static_cast<std::int64_t>(partition.edge_ids.size());
    cam_ids_.resize(n);
    pt_ids_.resize(n);
    std::vector<Scalar> px(n), py(n);
    weights_.resize(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& o = problem.observation(partition.edge_ids[i]);
      cam_ids_[i] = o.camera_id;
      pt_ids_[i] = o.point_id;
      px[i] = o.pixel.x();
      py[i] = o.pixel.y();
      weights_[i] = o.weight;
    }
    pixel_x_ = JetVector<Scalar>::constants(std::move(px));
    pixel_y_ = JetVector<Scalar>::constants(std::move(py));
  }

  std::int64_t num_edges() const {
    return static_cast<std::int64_t>(partition_->edge_ids.size());
  }
  std::span<const Scalar> weights() const {
    return {weights_.data(), weights_.size()};
  }
  std::span<const std::int32_t> camera_ids() const {
    return {cam_ids_.data(), cam_ids_.size()};
  }
  std::span<const std::int32_t> point_ids() const {
    return {pt_ids_.data(), pt_ids_.size()};
  }

  /// Residuals and local Jacobians at the given packed state. Throws
  /// DegenerateDepthError with the global edge id on zero depth. The returned
  /// reference stays valid until the next call.
  const EdgeJacobianBatch<Scalar>& linearize(std::span<const Scalar> x_c,
                                             std::span<const Scalar> x_p,
                                             WorkCounters* counters = nullptr) {
    return mode_ == JacobianMode::analytic ? linearize_analytic(x_c, x_p,
                                                                counters)
                                           : linearize_autodiff(x_c, x_p,
                                                                counters);
  }

  /// Forward-mode path: the whole partition batched through 12 seeded
  /// gradient lanes.
  const EdgeJacobianBatch<Scalar>& linearize_autodiff(
      std::span<const Scalar> x_c, std::span<const Scalar> x_p,
      WorkCounters* counters = nullptr) {
    const std::int64_t n = num_edges();
    arena_.reset();

    // Inputs: 9 camera lanes seeded on lanes 0..8, 3 point lanes on 9..11.
    std::array<JetVector<Scalar>*, kCameraParams> cam;
    for (int j = 0; j < kCameraParams; ++j) {
      cam[j] = &arena_.fresh(n, kLocalParams);
      gather(x_c, cam_ids_, kCameraParams, j, cam[j]->values());
      zero_grads_and_seed(*cam[j], j);
    }
    std::array<JetVector<Scalar>*, kPointParams> pt;
    for (int j = 0; j < kPointParams; ++j) {
      pt[j] = &arena_.fresh(n, kLocalParams);
      gather(x_p, pt_ids_, kPointParams, j, pt[j]->values());
      zero_grads_and_seed(*pt[j], kCameraParams + j);
    }

    // P = R(aa) * X + t
    std::array<JetVector<Scalar>*, 3> rotated = {
        &arena_.fresh(n, kLocalParams), &arena_.fresh(n, kLocalParams),
        &arena_.fresh(n, kLocalParams)};
    rotate_angle_axis<Scalar>({cam[0], cam[1], cam[2]}, {pt[0], pt[1], pt[2]},
                              rotated, arena_);
    for (int i = 0; i < 3; ++i) jv::add(*rotated[i], *cam[3 + i], *rotated[i]);

    const auto pz = rotated[2]->values();
    for (std::int64_t i = 0; i < n; ++i) {
      if (pz[i] == Scalar(0))
        throw DegenerateDepthError(partition_->edge_ids[i]);
    }

    // p = -(P_x, P_y) / P_z
    auto& proj_x = arena_.fresh(n, kLocalParams);
    auto& proj_y = arena_.fresh(n, kLocalParams);
    jv::div(*rotated[0], *rotated[2], proj_x);
    jv::neg(proj_x, proj_x);
    jv::div(*rotated[1], *rotated[2], proj_y);
    jv::neg(proj_y, proj_y);

    // distortion = 1 + k1 |p|^2 + k2 |p|^4
    auto& n2 = arena_.fresh(n, kLocalParams);
    auto& tmp = arena_.fresh(n, kLocalParams);
    jv::mul(proj_x, proj_x, n2);
    jv::mul(proj_y, proj_y, tmp);
    jv::add(n2, tmp, n2);
    auto& distortion = arena_.fresh(n, kLocalParams);
    jv::mul(n2, *cam[7], distortion);  // k1 |p|^2
    jv::mul(n2, n2, tmp);
    jv::mul(tmp, *cam[8], tmp);  // k2 |p|^4
    jv::add(distortion, tmp, distortion);
    jv::add_scalar(distortion, Scalar(1), distortion);

    // residual = focal * distortion * p - pixel
    auto& scale = distortion;
    jv::mul(scale, *cam[6], scale);
    jv::mul(proj_x, scale, proj_x);
    jv::sub(proj_x, pixel_x_, batch_.rx);
    jv::mul(proj_y, scale, proj_y);
    jv::sub(proj_y, pixel_y_, batch_.ry);

    if (counters) counters->edges_evaluated += static_cast<std::uint64_t>(n);
    return batch_;
  }

  /// Closed-form path: residual and the chain-rule factors of the Snavely
  /// model evaluated per edge,
  ///   dr/du = f (d I + 2 (k1 + 2 k2 n2) u u'),  u = -(P_x,P_y)/P_z,
  ///   du/dP = [-1/P_z, 0, P_x/P_z^2; 0, -1/P_z, P_y/P_z^2],
  ///   dP/dt = I,  dP/dX = R,  dP/daa from the rotation coefficients and
  ///   their t-derivatives (t = |aa|^2).
  const EdgeJacobianBatch<Scalar>& linearize_analytic(
      std::span<const Scalar> x_c, std::span<const Scalar> x_p,
      WorkCounters* counters = nullptr) {
    using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
    using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
    using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
    using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
    using Mat23 = Eigen::Matrix<Scalar, 2, 3>;
    const std::int64_t n = num_edges();
    batch_.rx.resize_uninitialized(n, kLocalParams);
    batch_.ry.resize_uninitialized(n, kLocalParams);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto camera = camera_from_params<Scalar>(x_c, cam_ids_[i]);
      const auto point = point_from_params<Scalar>(x_p, pt_ids_[i]);
      const Vec3& aa = camera.rotation;
      const Vec3& x = point.position;

      const Scalar t = aa.squaredNorm();
      Scalar c, s1, c2;
      detail::rotation_coefficient_values(t, c, s1, c2);
      Scalar dc, ds1, dc2;
      detail::rotation_coefficient_derivatives(t, c, s1, c2, dc, ds1, dc2);

      const Vec3 cross = aa.cross(x);
      const Scalar dot = aa.dot(x);
      const Vec3 rotated = x * c + cross * s1 + aa * (dot * c2);
      const Vec3 p = rotated + camera.translation;
      if (p.z() == Scalar(0))
        throw DegenerateDepthError(partition_->edge_ids[i]);

      // dP/daa: column j = 2 aa_j (x c' + cross s1' + aa dot c2')
      //                    + e_j x x s1 + e_j dot c2 + aa x_j c2.
      const Vec3 dt_term = x * dc + cross * ds1 + aa * (dot * dc2);
      Mat3 dp_daa;
      for (int j = 0; j < 3; ++j) {
        Vec3 ej = Vec3::Zero();
        ej[j] = Scalar(1);
        dp_daa.col(j) = Scalar(2) * aa[j] * dt_term + ej.cross(x) * s1 +
                        ej * (dot * c2) + aa * (x[j] * c2);
      }
      const Mat3 rot = c * Mat3::Identity() + s1 * skew(aa) +
                       c2 * (aa * aa.transpose());

      const Vec2 u(-p.x() / p.z(), -p.y() / p.z());
      const Scalar n2 = u.squaredNorm();
      const Scalar dist = Scalar(1) + camera.k1 * n2 + camera.k2 * n2 * n2;

      Mat23 du_dp;
      const Scalar inv_z = Scalar(1) / p.z();
      du_dp << -inv_z, Scalar(0), p.x() * inv_z * inv_z, Scalar(0), -inv_z,
          p.y() * inv_z * inv_z;

      const Mat2 dr_du =
          camera.focal *
          (dist * Mat2::Identity() +
           Scalar(2) * (camera.k1 + Scalar(2) * camera.k2 * n2) *
               (u * u.transpose()));
      const Mat23 dr_dp = dr_du * du_dp;

      const Vec2 res = camera.focal * dist * u - Vec2(pixel_x_.value(i),
                                                      pixel_y_.value(i));
      batch_.rx.values()[i] = res.x();
      batch_.ry.values()[i] = res.y();

      const Mat23 j_rot = dr_dp * dp_daa;
      const Mat23 j_pt = dr_dp * rot;
      for (int col = 0; col < 3; ++col) {
        batch_.rx.grad_lane(col)[i] = j_rot(0, col);
        batch_.ry.grad_lane(col)[i] = j_rot(1, col);
        batch_.rx.grad_lane(3 + col)[i] = dr_dp(0, col);
        batch_.ry.grad_lane(3 + col)[i] = dr_dp(1, col);
        batch_.rx.grad_lane(kCameraParams + col)[i] = j_pt(0, col);
        batch_.ry.grad_lane(kCameraParams + col)[i] = j_pt(1, col);
      }
      const Vec2 du = dist * u;
      const Vec2 dk1 = camera.focal * n2 * u;
      const Vec2 dk2 = camera.focal * n2 * n2 * u;
      batch_.rx.grad_lane(6)[i] = du.x();
      batch_.ry.grad_lane(6)[i] = du.y();
      batch_.rx.grad_lane(7)[i] = dk1.x();
      batch_.ry.grad_lane(7)[i] = dk1.y();
      batch_.rx.grad_lane(8)[i] = dk2.x();
      batch_.ry.grad_lane(8)[i] = dk2.y();
    }
    if (counters) counters->edges_evaluated += static_cast<std::uint64_t>(n);
    return batch_;
  }

  /// Sum of weighted squared residual norms over this partition via the
  /// scalar model, accumulated in double in partition edge order.
  double cost(std::span<const Scalar> x_c, std::span<const Scalar> x_p,
              WorkCounters* counters = nullptr) const {
    double sum = 0.0;
    const std::int64_t n = num_edges();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto camera = camera_from_params<Scalar>(x_c, cam_ids_[i]);
      const auto point = point_from_params<Scalar>(x_p, pt_ids_[i]);
      Eigen::Matrix<Scalar, 2, 1> r;
      try {
        r = dba::residual<Scalar>(
            camera, point,
            Eigen::Matrix<Scalar, 2, 1>(pixel_x_.value(i), pixel_y_.value(i)));
      } catch (const DegenerateDepthError&) {
        throw DegenerateDepthError(partition_->edge_ids[i]);
      }
      sum += static_cast<double>(weights_[i]) *
             static_cast<double>(r.squaredNorm());
    }
    if (counters) counters->edges_evaluated += static_cast<std::uint64_t>(n);
    return sum;
  }

 private:
  static void gather(std::span<const Scalar> x,
                     const std::vector<std::int32_t>& ids, int stride,
                     int component, std::span<Scalar> out) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      out[i] = x[static_cast<std::size_t>(ids[i]) * stride + component];
  }

  static Eigen::Matrix<Scalar, 3, 3> skew(
      const Eigen::Matrix<Scalar, 3, 1>& v) {
    Eigen::Matrix<Scalar, 3, 3> m;
    m << Scalar(0), -v.z(), v.y(), v.z(), Scalar(0), -v.x(), -v.y(), v.x(),
        Scalar(0);
    return m;
  }

  static void zero_grads_and_seed(JetVector<Scalar>& jet, int seed_lane) {
    for (int j = 0; j < jet.grad_dim(); ++j) {
      auto g = jet.grad_lane(j);
      std::fill(g.begin(), g.end(), j == seed_lane ? Scalar(1) : Scalar(0));
    }
  }

  const BAProblem<Scalar>* problem_;
  const EdgePartition* partition_;
  JacobianMode mode_ = JacobianMode::autodiff;
  std::vector<std::int32_t> cam_ids_, pt_ids_;
  std::vector<Scalar> weights_;
  JetVector<Scalar> pixel_x_, pixel_y_;
  JetArena<Scalar> arena_;
  EdgeJacobianBatch<Scalar> batch_;
};

/// One-shot convenience wrapper around EdgeEvaluator::linearize.
template <typename Scalar>
EdgeJacobianBatch<Scalar> evaluate_edges(const BAProblem<Scalar>& problem,
                                         const EdgePartition& partition,
                                         std::span<const Scalar> x_c,
                                         std::span<const Scalar> x_p) {
  EdgeEvaluator<Scalar> evaluator(problem, partition);
  EdgeJacobianBatch<Scalar> out = evaluator.linearize(x_c, x_p);
  return out;
}

}  // namespace dba
