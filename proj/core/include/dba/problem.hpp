#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dba/errors.hpp"

namespace dba {

/// How total reprojection cost is normalized into a mean squared error.
/// `per_observation` divides the summed squared residual norms by the number
/// of observations; `half_per_observation` additionally halves it (the
/// convention used by solvers that define cost as one half of the squared
/// norm). The halved variant is the one that matches published BAL result
/// tables, so it is the default throughout.
enum class MseConvention { per_observation, half_per_observation };

inline double mse_from_cost(double cost, std::int64_t num_observations,
                            MseConvention convention) {
  if (num_observations <= 0) return 0.0;
  const double denom = convention == MseConvention::half_per_observation
                           ? 2.0 * static_cast<double>(num_observations)
                           : static_cast<double>(num_observations);
  return cost / denom;
}

/// One camera in the BAL 9-parameter convention: angle-axis rotation,
/// translation, focal length and two radial distortion coefficients.
template <typename Scalar>
struct CameraState {
  Eigen::Matrix<Scalar, 3, 1> rotation = Eigen::Matrix<Scalar, 3, 1>::Zero();
  Eigen::Matrix<Scalar, 3, 1> translation = Eigen::Matrix<Scalar, 3, 1>::Zero();
  Scalar focal = Scalar(1);
  Scalar k1 = Scalar(0);
  Scalar k2 = Scalar(0);

  bool all_finite() const {
    return rotation.allFinite() && translation.allFinite() &&
           std::isfinite(static_cast<double>(focal)) &&
           std::isfinite(static_cast<double>(k1)) &&
           std::isfinite(static_cast<double>(k2));
  }
};

template <typename Scalar>
struct PointState {
  Eigen::Matrix<Scalar, 3, 1> position = Eigen::Matrix<Scalar, 3, 1>::Zero();

  bool all_finite() const { return position.allFinite(); }
};

/// One edge of the BA graph: a pixel measurement linking a camera and a point.
/// weight = 1 corresponds to the identity information matrix.
template <typename Scalar>
struct Observation {
  std::int32_t camera_id = 0;
  std::int32_t point_id = 0;
  Eigen::Matrix<Scalar, 2, 1> pixel = Eigen::Matrix<Scalar, 2, 1>::Zero();
  Scalar weight = Scalar(1);
};

// Number of parameters per camera / per point and per-edge local total.
inline constexpr int kCameraParams = 9;
inline constexpr int kPointParams = 3;
inline constexpr int kLocalParams = kCameraParams + kPointParams;

/// Angle-axis small-angle threshold on theta^2. Below it the rotation
/// coefficients switch to their second-order Taylor expansions so values and
/// gradients stay finite and continuous through theta = 0.
template <typename Scalar>
constexpr Scalar rotation_taylor_threshold() {
  if constexpr (sizeof(Scalar) == sizeof(double)) {
    return Scalar(1e-12);
  } else {
    return Scalar(1e-4);
  }
}

namespace detail {

// cos(theta), sin(theta)/theta and (1-cos(theta))/theta^2 as functions of
// t = theta^2. All three are even in theta, which keeps the Taylor branch a
// plain polynomial in t.
template <typename Scalar>
inline void rotation_coefficient_values(Scalar t, Scalar& c, Scalar& s1,
                                        Scalar& c2) {
  if (t < rotation_taylor_threshold<Scalar>()) {
    c = Scalar(1) - t / Scalar(2) + t * t / Scalar(24);
    s1 = Scalar(1) - t / Scalar(6) + t * t / Scalar(120);
    c2 = Scalar(0.5) - t / Scalar(24) + t * t / Scalar(720);
  } else {
    const Scalar theta = std::sqrt(t);
    c = std::cos(theta);
    s1 = std::sin(theta) / theta;
    c2 = (Scalar(1) - c) / t;
  }
}

// d/dt of the three coefficients, with the matching Taylor branch.
template <typename Scalar>
inline void rotation_coefficient_derivatives(Scalar t, Scalar c, Scalar s1,
                                             Scalar c2, Scalar& dc,
                                             Scalar& ds1, Scalar& dc2) {
  if (t < rotation_taylor_threshold<Scalar>()) {
    dc = Scalar(-0.5) + t / Scalar(12);
    ds1 = Scalar(-1) / Scalar(6) + t / Scalar(60);
    dc2 = Scalar(-1) / Scalar(24) + t / Scalar(360);
  } else {
    dc = -s1 / Scalar(2);
    ds1 = (c - s1) / (Scalar(2) * t);
    dc2 = (s1 / Scalar(2) - c2) / t;
  }
}

}  // namespace detail

/// Rodrigues rotation of x by the angle-axis vector aa. Written with the
/// same operation order as the batched jet composition so both paths agree
/// bit-for-bit.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> angle_axis_rotate(
    const Eigen::Matrix<Scalar, 3, 1>& aa,
    const Eigen::Matrix<Scalar, 3, 1>& x) {
  const Scalar t = (aa[0] * aa[0] + aa[1] * aa[1]) + aa[2] * aa[2];
  Scalar c, s1, c2;
  detail::rotation_coefficient_values(t, c, s1, c2);
  const Scalar dot_c2 = ((aa[0] * x[0] + aa[1] * x[1]) + aa[2] * x[2]) * c2;
  Eigen::Matrix<Scalar, 3, 1> out;
  for (int i = 0; i < 3; ++i) {
    const int i1 = (i + 1) % 3;
    const int i2 = (i + 2) % 3;
    const Scalar cross = aa[i1] * x[i2] - aa[i2] * x[i1];
    out[i] = (x[i] * c + cross * s1) + aa[i] * dot_c2;
  }
  return out;
}

/// Snavely reprojection residual for the BAL camera model:
///   P = R(rotation) * X + t,  p = -(P_x, P_y) / P_z,
///   d = 1 + k1 |p|^2 + k2 |p|^4,  residual = focal * d * p - pixel.
/// Throws DegenerateDepthError when P_z = 0.
///
/// Operations are ordered exactly like the batched jet evaluation so the two
/// paths agree bit-for-bit; in particular a state whose batched residuals are
/// all zero also has an exactly zero scalar cost.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> residual(const CameraState<Scalar>& camera,
                                     const PointState<Scalar>& point,
                                     const Eigen::Matrix<Scalar, 2, 1>& pixel) {
  const Eigen::Matrix<Scalar, 3, 1> p =
      angle_axis_rotate<Scalar>(camera.rotation, point.position) +
      camera.translation;
  if (p.z() == Scalar(0)) throw DegenerateDepthError();
  const Eigen::Matrix<Scalar, 2, 1> proj(-(p.x() / p.z()), -(p.y() / p.z()));
  const Scalar n2 = proj.x() * proj.x() + proj.y() * proj.y();
  const Scalar distortion = (n2 * camera.k1 + (n2 * n2) * camera.k2) + Scalar(1);
  const Scalar scale = distortion * camera.focal;
  return Eigen::Matrix<Scalar, 2, 1>(proj.x() * scale - pixel.x(),
                                     proj.y() * scale - pixel.y());
}

/// The bundle adjustment graph: camera nodes, point nodes and observation
/// edges. Immutable after construction; all read paths are safe to share
/// across worker contexts. The observation list order is the canonical edge
/// order used by partitioning.
template <typename Scalar>
class BAProblem {
 public:
  using Camera = CameraState<Scalar>;
  using Point = PointState<Scalar>;
  using Obs = Observation<Scalar>;

  /// Appends a camera node; returns its index (camera and point index spaces
  /// are separate). Throws on non-finite components.
  std::int32_t add_node(const Camera& camera) {
    if (!camera.all_finite())
      throw InvalidArgumentError("camera node has non-finite components");
    cameras_.push_back(camera);
    return static_cast<std::int32_t>(cameras_.size()) - 1;
  }

  std::int32_t add_node(const Point& point) {
    if (!point.all_finite())
      throw InvalidArgumentError("point node has non-finite components");
    points_.push_back(point);
    return static_cast<std::int32_t>(points_.size()) - 1;
  }

  /// Appends an observation edge at the end of the canonical edge order.
  /// Throws when it references an unregistered camera or point.
  std::int32_t add_edge(const Obs& obs) {
    if (obs.camera_id < 0 || obs.camera_id >= num_cameras())
      throw InvalidArgumentError("edge references unknown camera " +
                                 std::to_string(obs.camera_id));
    if (obs.point_id < 0 || obs.point_id >= num_points())
      throw InvalidArgumentError("edge references unknown point " +
                                 std::to_string(obs.point_id));
    if (!(obs.weight >= Scalar(0)))
      throw InvalidArgumentError("edge weight must be >= 0");
    observations_.push_back(obs);
    return static_cast<std::int32_t>(observations_.size()) - 1;
  }

  std::int32_t num_cameras() const {
    return static_cast<std::int32_t>(cameras_.size());
  }
  std::int32_t num_points() const {
    return static_cast<std::int32_t>(points_.size());
  }
  std::int64_t num_observations() const {
    return static_cast<std::int64_t>(observations_.size());
  }

  const std::vector<Camera>& cameras() const { return cameras_; }
  const std::vector<Point>& points() const { return points_; }
  const std::vector<Obs>& observations() const { return observations_; }

  Camera& camera(std::int32_t i) { return cameras_[i]; }
  const Camera& camera(std::int32_t i) const { return cameras_[i]; }
  Point& point(std::int32_t i) { return points_[i]; }
  const Point& point(std::int32_t i) const { return points_[i]; }
  const Obs& observation(std::int64_t i) const { return observations_[i]; }

  /// Non-fatal consistency warnings: nodes never referenced by an edge,
  /// cameras with non-positive focal length.
  std::vector<std::string> validate() const {
    std::vector<std::string> warnings;
    std::vector<bool> camera_used(cameras_.size(), false);
    std::vector<bool> point_used(points_.size(), false);
    for (const Obs& o : observations_) {
      camera_used[o.camera_id] = true;
      point_used[o.point_id] = true;
    }
    for (std::size_t i = 0; i < camera_used.size(); ++i) {
      if (!camera_used[i])
        warnings.push_back("camera " + std::to_string(i) +
                           " is not referenced by any observation");
    }
    for (std::size_t i = 0; i < point_used.size(); ++i) {
      if (!point_used[i])
        warnings.push_back("point " + std::to_string(i) +
                           " is not referenced by any observation");
    }
    for (std::size_t i = 0; i < cameras_.size(); ++i) {
      if (!(cameras_[i].focal > Scalar(0)))
        warnings.push_back("camera " + std::to_string(i) +
                           " has non-positive focal length");
    }
    return warnings;
  }

 private:
  std::vector<Camera> cameras_;
  std::vector<Point> points_;
  std::vector<Obs> observations_;
};

/// Sum of weighted squared residual norms over all observations, accumulated
/// in double in edge order. Rethrows degenerate-depth errors with the
/// offending edge index attached.
template <typename Scalar>
double total_cost(const BAProblem<Scalar>& problem) {
  double cost = 0.0;
  const auto& obs = problem.observations();
  for (std::size_t e = 0; e < obs.size(); ++e) {
    const auto& o = obs[e];
    Eigen::Matrix<Scalar, 2, 1> r;
    try {
      r = residual<Scalar>(problem.camera(o.camera_id),
                           problem.point(o.point_id), o.pixel);
    } catch (const DegenerateDepthError&) {
      throw DegenerateDepthError(static_cast<std::int64_t>(e));
    }
    cost += static_cast<double>(o.weight) *
            static_cast<double>(r.squaredNorm());
  }
  return cost;
}

template <typename Scalar>
double mean_squared_error(const BAProblem<Scalar>& problem,
                          MseConvention convention) {
  return mse_from_cost(total_cost(problem), problem.num_observations(),
                       convention);
}

/// Flattens camera states into a 9m vector (rotation, translation, focal, k1,
/// k2 per camera) and point states into a 3n vector.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pack_cameras(
    const BAProblem<Scalar>& problem) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> x(kCameraParams *
                                             problem.num_cameras());
  for (std::int32_t i = 0; i < problem.num_cameras(); ++i) {
    const auto& c = problem.camera(i);
    x.template segment<3>(kCameraParams * i) = c.rotation;
    x.template segment<3>(kCameraParams * i + 3) = c.translation;
    x[kCameraParams * i + 6] = c.focal;
    x[kCameraParams * i + 7] = c.k1;
    x[kCameraParams * i + 8] = c.k2;
  }
  return x;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pack_points(
    const BAProblem<Scalar>& problem) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> x(kPointParams *
                                             problem.num_points());
  for (std::int32_t i = 0; i < problem.num_points(); ++i)
    x.template segment<3>(kPointParams * i) = problem.point(i).position;
  return x;
}

template <typename Scalar>
CameraState<Scalar> camera_from_params(std::span<const Scalar> x_c,
                                       std::int32_t camera_id) {
  const Scalar* p = x_c.data() + kCameraParams * camera_id;
  CameraState<Scalar> c;
  c.rotation = Eigen::Matrix<Scalar, 3, 1>(p[0], p[1], p[2]);
  c.translation = Eigen::Matrix<Scalar, 3, 1>(p[3], p[4], p[5]);
  c.focal = p[6];
  c.k1 = p[7];
  c.k2 = p[8];
  return c;
}

template <typename Scalar>
PointState<Scalar> point_from_params(std::span<const Scalar> x_p,
                                     std::int32_t point_id) {
  const Scalar* p = x_p.data() + kPointParams * point_id;
  return PointState<Scalar>{Eigen::Matrix<Scalar, 3, 1>(p[0], p[1], p[2])};
}

/// Writes packed parameter vectors back into problem states.
template <typename Scalar>
void unpack_states(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x_c,
                   const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x_p,
                   BAProblem<Scalar>& problem) {
  for (std::int32_t i = 0; i < problem.num_cameras(); ++i) {
    problem.camera(i) = camera_from_params<Scalar>(
        std::span<const Scalar>(x_c.data(), x_c.size()), i);
  }
  for (std::int32_t i = 0; i < problem.num_points(); ++i) {
    problem.point(i) = point_from_params<Scalar>(
        std::span<const Scalar>(x_p.data(), x_p.size()), i);
  }
}

}  // namespace dba
