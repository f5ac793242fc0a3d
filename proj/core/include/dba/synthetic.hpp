#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "dba/problem.hpp"

namespace dba {

/// Parameters of the synthetic ring dataset: cameras uniformly on a circle of
/// radius 8 facing the origin, a point cluster around the origin, each point
/// observed by its Q nearest cameras. Observations are projections of the
/// ground-truth points through the perturbed cameras, so the stored (noisy)
/// points start with nonzero residuals while an exact optimum exists.
struct SyntheticOptions {
  std::int32_t cameras = 20000;
  std::int32_t points = 80000;
  std::int32_t obs_per_point = 1000;
  std::uint64_t seed = 1;

  double circle_radius = 8.0;
  double base_focal = 1000.0;
  double pose_noise = 0.01;       // U(0, .) on rotation and translation
  double intrinsic_noise = 0.5;   // U(0, .) on focal, k1, k2
  double point_noise = 0.1;       // U(-., .) on stored point x, y
};

inline std::int64_t synthetic_observation_count(const SyntheticOptions& o) {
  return static_cast<std::int64_t>(o.points) * o.obs_per_point;
}

namespace detail {

// Uniform draws built directly on the engine output so files are identical
// for a fixed seed on every platform.
class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : engine_(seed) {}
  double unit() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double range(double lo, double hi) { return lo + (hi - lo) * unit(); }

 private:
  std::mt19937_64 engine_;
};

inline Eigen::Matrix3d look_at_origin(const Eigen::Vector3d& center) {
  // Rows map world axes to the camera frame; the optical axis is -z, so the
  // direction towards the scene (the negated unit center) maps to -z.
  const Eigen::Vector3d cz = center.normalized();
  Eigen::Vector3d up(0, 0, 1);
  Eigen::Vector3d right = up.cross(cz).normalized();
  const Eigen::Vector3d cam_up = cz.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right.transpose();
  r.row(1) = cam_up.transpose();
  r.row(2) = cz.transpose();
  return r;
}

}  // namespace detail

/// Deterministic synthetic BA problem for a fixed seed. Throws when a point
/// would need more observing cameras than exist.
inline BAProblem<double> generate_synthetic(const SyntheticOptions& opt) {
  if (opt.cameras < 1 || opt.points < 1 || opt.obs_per_point < 1)
    throw InvalidArgumentError("synthetic counts must be positive");
  if (opt.obs_per_point > opt.cameras)
    throw InvalidArgumentError(
        "obs-per-point " + std::to_string(opt.obs_per_point) +
        " exceeds camera count " + std::to_string(opt.cameras));

  detail::Uniform rng(opt.seed);
  BAProblem<double> problem;

  std::vector<Eigen::Vector3d> centers(opt.cameras);
  std::vector<CameraState<double>> noisy_cameras(opt.cameras);
  for (std::int32_t i = 0; i < opt.cameras; ++i) {
    const double angle =
        2.0 * EIGEN_PI * static_cast<double>(i) / static_cast<double>(opt.cameras);
    const Eigen::Vector3d center(opt.circle_radius * std::cos(angle),
                                 opt.circle_radius * std::sin(angle), 0.0);
    centers[i] = center;
    const Eigen::Matrix3d rot = detail::look_at_origin(center);
    const Eigen::AngleAxisd aa(rot);

    CameraState<double> cam;
    cam.rotation = aa.angle() * aa.axis();
    cam.translation = -(rot * center);
    for (int j = 0; j < 3; ++j)
      cam.rotation[j] += rng.range(0.0, opt.pose_noise);
    for (int j = 0; j < 3; ++j)
      cam.translation[j] += rng.range(0.0, opt.pose_noise);
    cam.focal = opt.base_focal + rng.range(0.0, opt.intrinsic_noise);
    cam.k1 = rng.range(0.0, opt.intrinsic_noise);
    cam.k2 = rng.range(0.0, opt.intrinsic_noise);
    noisy_cameras[i] = cam;
    problem.add_node(cam);
  }

  std::vector<Eigen::Vector3d> true_points(opt.points);
  for (std::int32_t i = 0; i < opt.points; ++i) {
    Eigen::Vector3d p(rng.range(-0.1, 0.1), rng.range(-0.1, 0.1),
                      rng.range(-0.03, 0.03));
    true_points[i] = p;
    PointState<double> stored;
    stored.position = p;
    stored.position.x() += rng.range(-opt.point_noise, opt.point_noise);
    stored.position.y() += rng.range(-opt.point_noise, opt.point_noise);
    problem.add_node(stored);
  }

  // Each point is seen by its Q nearest cameras (by ground-truth distance);
  // edges are emitted point-major with ascending camera ids.
  std::vector<std::int32_t> order(opt.cameras);
  std::vector<double> dist2(opt.cameras);
  for (std::int32_t p = 0; p < opt.points; ++p) {
    std::iota(order.begin(), order.end(), 0);
    for (std::int32_t c = 0; c < opt.cameras; ++c)
      dist2[c] = (centers[c] - true_points[p]).squaredNorm();
    std::nth_element(order.begin(), order.begin() + opt.obs_per_point - 1,
                     order.end(), [&](std::int32_t a, std::int32_t b) {
                       return dist2[a] != dist2[b] ? dist2[a] < dist2[b]
                                                   : a < b;
                     });
    std::sort(order.begin(), order.begin() + opt.obs_per_point);
    for (std::int32_t q = 0; q < opt.obs_per_point; ++q) {
      const std::int32_t cam_id = order[q];
      PointState<double> gt;
      gt.position = true_points[p];
      const Eigen::Vector2d projected =
          residual<double>(noisy_cameras[cam_id], gt, Eigen::Vector2d::Zero());
      Observation<double> obs;
      obs.camera_id = cam_id;
      obs.point_id = p;
      obs.pixel = projected;
      problem.add_edge(obs);
    }
  }
  return problem;
}

}  // namespace dba
