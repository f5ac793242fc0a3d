#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "dba/problem.hpp"

namespace dba {

/// Bidirectional map between a global index space and the compact local space
/// of the ids actually touched by a partition, in first-appearance order.
class LocalIndexMap {
 public:
  LocalIndexMap() = default;
  LocalIndexMap(std::span<const std::int32_t> ids, std::int32_t global_count)
      : to_local_(global_count, -1) {
    for (std::int32_t id : ids) {
      if (to_local_[id] < 0) {
        to_local_[id] = static_cast<std::int32_t>(to_global_.size());
        to_global_.push_back(id);
      }
    }
  }

  /// Local index for a global id, -1 when the id is untouched.
  std::int32_t local(std::int32_t global_id) const {
    return to_local_[global_id];
  }
  std::int32_t global(std::int32_t local_id) const {
    return to_global_[local_id];
  }
  std::int32_t size() const {
    return static_cast<std::int32_t>(to_global_.size());
  }
  std::int32_t global_count() const {
    return static_cast<std::int32_t>(to_local_.size());
  }
  const std::vector<std::int32_t>& to_global() const { return to_global_; }

 private:
  std::vector<std::int32_t> to_local_;
  std::vector<std::int32_t> to_global_;
};

/// One worker's share of the edge list plus the local index maps covering
/// exactly the cameras and points its edges touch.
struct EdgePartition {
  int worker_rank = 0;
  std::vector<std::int32_t> edge_ids;  // contiguous slice of the global order
  LocalIndexMap camera_map;
  LocalIndexMap point_map;
};

/// Local camera/point maps for an arbitrary edge slice, enumerated in
/// first-appearance order.
template <typename Scalar>
std::pair<LocalIndexMap, LocalIndexMap> build_local_maps(
    const BAProblem<Scalar>& problem, std::span<const std::int32_t> edge_ids) {
  std::vector<std::int32_t> cams, pts;
  cams.reserve(edge_ids.size());
  pts.reserve(edge_ids.size());
  for (std::int32_t e : edge_ids) {
    const auto& o = problem.observation(e);
    cams.push_back(o.camera_id);
    pts.push_back(o.point_id);
  }
  return {LocalIndexMap(cams, problem.num_cameras()),
          LocalIndexMap(pts, problem.num_points())};
}

/// Splits the canonical edge order into worker_count contiguous chunks whose
/// sizes differ by at most one; the first (N mod K) workers receive the extra
/// edge. Deterministic for a fixed (problem, K).
template <typename Scalar>
std::vector<EdgePartition> partition_edges(const BAProblem<Scalar>& problem,
                                           int worker_count) {
  const std::int64_t n = problem.num_observations();
  if (worker_count < 1)
    throw InvalidArgumentError("worker count must be >= 1");
  if (worker_count > n)
    throw InvalidArgumentError("worker count " + std::to_string(worker_count) +
                               " exceeds number of edges " + std::to_string(n));

  std::vector<EdgePartition> parts(worker_count);
  const std::int64_t base = n / worker_count;
  const std::int64_t extra = n % worker_count;
  std::int64_t next = 0;
  for (int k = 0; k < worker_count; ++k) {
    const std::int64_t count = base + (k < extra ? 1 : 0);
    EdgePartition& part = parts[k];
    part.worker_rank = k;
    part.edge_ids.resize(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i)
      part.edge_ids[i] = static_cast<std::int32_t>(next + i);
    next += count;
    auto maps = build_local_maps(problem, part.edge_ids);
    part.camera_map = std::move(maps.first);
    part.point_map = std::move(maps.second);
  }
  return parts;
}

}  // namespace dba
