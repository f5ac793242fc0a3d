#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <vector>

#include "dba/counters.hpp"
#include "dba/edge_eval.hpp"
#include "dba/errors.hpp"
#include "dba/partition.hpp"
#include "dba/problem.hpp"

namespace dba {

enum class DampingPolicy {
  identity,     // D' = D + lambda * I
  diag_scaled,  // D'_ii = D_ii + lambda * clamp(D_ii): scale-invariant
};

// Clamp bounds for the diag-scaled policy, so near-zero curvature directions
// still receive some damping and enormous ones cannot overflow.
inline constexpr double kDampingDiagFloor = 1e-6;
inline constexpr double kDampingDiagCeiling = 1e32;

template <typename Scalar>
Scalar clamped_curvature(Scalar diag) {
  const Scalar lo = static_cast<Scalar>(kDampingDiagFloor);
  const Scalar hi = static_cast<Scalar>(kDampingDiagCeiling);
  return std::min(hi, std::max(lo, diag));
}

/// Block-diagonal matrix with fixed BS x BS dense blocks stored contiguously
/// (row-major within each block).
template <typename Scalar, int BS>
class BlockDiagonal {
 public:
  using Block = Eigen::Matrix<Scalar, BS, BS, Eigen::RowMajor>;
  using BlockMap = Eigen::Map<Block>;
  using ConstBlockMap = Eigen::Map<const Block>;

  BlockDiagonal() = default;
  explicit BlockDiagonal(std::int64_t num_blocks) { resize(num_blocks); }

  void resize(std::int64_t num_blocks) {
    num_blocks_ = num_blocks;
    data_.assign(static_cast<std::size_t>(num_blocks) * BS * BS, Scalar(0));
  }
  void set_zero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

  std::int64_t blocks() const { return num_blocks_; }
  std::int64_t dim() const { return num_blocks_ * BS; }

  BlockMap block(std::int64_t i) {
    return BlockMap(data_.data() + static_cast<std::size_t>(i) * BS * BS);
  }
  ConstBlockMap block(std::int64_t i) const {
    return ConstBlockMap(data_.data() + static_cast<std::size_t>(i) * BS * BS);
  }

  std::span<Scalar> data() { return {data_.data(), data_.size()}; }
  std::span<const Scalar> data() const { return {data_.data(), data_.size()}; }

  /// y = D x, block by block.
  void apply(std::span<const Scalar> x, std::span<Scalar> y) const {
    if (static_cast<std::int64_t>(x.size()) != dim() || x.size() != y.size())
      throw ShapeError("block-diagonal apply: dimension mismatch");
    for (std::int64_t i = 0; i < num_blocks_; ++i) {
      Eigen::Map<const Eigen::Matrix<Scalar, BS, 1>> xi(x.data() + i * BS);
      Eigen::Map<Eigen::Matrix<Scalar, BS, 1>> yi(y.data() + i * BS);
      yi.noalias() = block(i) * xi;
    }
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> apply(
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x) const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y(x.size());
    apply(std::span<const Scalar>(x.data(), x.size()),
          std::span<Scalar>(y.data(), y.size()));
    return y;
  }

  /// Damped copy into `out`; the undamped blocks stay untouched so lambda
  /// changes never require reassembly.
  void damp_into(Scalar lambda, DampingPolicy policy,
                 BlockDiagonal& out) const {
    out.num_blocks_ = num_blocks_;
    out.data_ = data_;
    for (std::int64_t i = 0; i < num_blocks_; ++i) {
      auto b = out.block(i);
      for (int j = 0; j < BS; ++j) {
        if (policy == DampingPolicy::identity)
          b(j, j) += lambda;
        else
          b(j, j) += lambda * clamped_curvature(b(j, j));
      }
    }
  }

  /// Diagonal entries as a flat vector (used by the diag-scaled gain-ratio
  /// model term).
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> diagonal() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> d(dim());
    for (std::int64_t i = 0; i < num_blocks_; ++i)
      for (int j = 0; j < BS; ++j) d[i * BS + j] = block(i)(j, j);
    return d;
  }

 private:
  std::int64_t num_blocks_ = 0;
  std::vector<Scalar> data_;
};

/// Cholesky factors of a block-diagonal matrix, factored once per damping
/// attempt and reused across all PCG iterations. Throws SingularBlockError
/// naming the block when a block is not positive definite.
template <typename Scalar, int BS>
class FactoredBlockDiagonal {
 public:
  FactoredBlockDiagonal() = default;

  void factor(const BlockDiagonal<Scalar, BS>& d) {
    num_blocks_ = d.blocks();
    lower_.resize(static_cast<std::size_t>(num_blocks_) * BS * BS);
    Eigen::LLT<Eigen::Matrix<Scalar, BS, BS>> llt;
    for (std::int64_t i = 0; i < num_blocks_; ++i) {
      llt.compute(d.block(i));
      if (llt.info() != Eigen::Success) throw SingularBlockError(i, BS);
      Eigen::Map<Eigen::Matrix<Scalar, BS, BS>> l(
          lower_.data() + static_cast<std::size_t>(i) * BS * BS);
      l = llt.matrixL();
    }
  }

  std::int64_t blocks() const { return num_blocks_; }
  std::int64_t dim() const { return num_blocks_ * BS; }

  /// x := D^{-1} x blockwise via forward/back substitution.
  void solve_in_place(std::span<Scalar> x) const {
    if (static_cast<std::int64_t>(x.size()) != dim())
      throw ShapeError("block-diagonal solve: dimension mismatch");
    for (std::int64_t i = 0; i < num_blocks_; ++i) {
      Eigen::Map<const Eigen::Matrix<Scalar, BS, BS>> l(
          lower_.data() + static_cast<std::size_t>(i) * BS * BS);
      Eigen::Map<Eigen::Matrix<Scalar, BS, 1>> xi(x.data() + i * BS);
      l.template triangularView<Eigen::Lower>().solveInPlace(xi);
      l.transpose().template triangularView<Eigen::Upper>().solveInPlace(xi);
    }
  }

  void solve(std::span<const Scalar> in, std::span<Scalar> out) const {
    std::copy(in.begin(), in.end(), out.begin());
    solve_in_place(out);
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> solve(
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x) const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> y = x;
    solve_in_place(std::span<Scalar>(y.data(), y.size()));
    return y;
  }

 private:
  std::int64_t num_blocks_ = 0;
  std::vector<Scalar> lower_;
};

/// The camera-point coupling blocks of one partition: one dense 9x3 block per
/// local edge, stored in partition edge order, with compressed index arrays
/// grouping the blocks by local camera (for E b) and by local point (for
/// E^T x). Only the cameras and points the partition touches are indexed;
/// the apply operations scatter into full-size global vectors.
template <typename Scalar>
class EdgeBlockMatrix {
 public:
  using Block =
      Eigen::Matrix<Scalar, kCameraParams, kPointParams, Eigen::RowMajor>;
  using BlockMap = Eigen::Map<Block>;
  using ConstBlockMap = Eigen::Map<const Block>;

  EdgeBlockMatrix() = default;

  template <typename S2>
  EdgeBlockMatrix(const BAProblem<S2>& problem, const EdgePartition& partition)
      : num_cameras_(problem.num_cameras()),
        num_points_(problem.num_points()),
        cam_to_global_(partition.camera_map.to_global()),
        pt_to_global_(partition.point_map.to_global()) {
    const std::int64_t n = static_cast<std::int64_t>(partition.edge_ids.size());
    cam_of_block_.resize(n);
    pt_of_block_.resize(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& o = problem.observation(partition.edge_ids[i]);
      cam_of_block_[i] = partition.camera_map.local(o.camera_id);
      pt_of_block_[i] = partition.point_map.local(o.point_id);
    }
    blocks_.assign(static_cast<std::size_t>(n) * kCameraParams * kPointParams,
                   Scalar(0));
    build_groups(cam_of_block_, static_cast<std::int32_t>(cam_to_global_.size()),
                 cam_ptr_, cam_blocks_);
    build_groups(pt_of_block_, static_cast<std::int32_t>(pt_to_global_.size()),
                 pt_ptr_, pt_blocks_);
  }

  std::int64_t blocks() const {
    return static_cast<std::int64_t>(cam_of_block_.size());
  }
  std::int64_t camera_dim() const {
    return std::int64_t{num_cameras_} * kCameraParams;
  }
  std::int64_t point_dim() const {
    return std::int64_t{num_points_} * kPointParams;
  }

  BlockMap block(std::int64_t i) {
    return BlockMap(blocks_.data() +
                    static_cast<std::size_t>(i) * kCameraParams * kPointParams);
  }
  ConstBlockMap block(std::int64_t i) const {
    return ConstBlockMap(blocks_.data() +
                         static_cast<std::size_t>(i) * kCameraParams *
                             kPointParams);
  }

  std::int32_t camera_of_block(std::int64_t i) const {
    return cam_to_global_[cam_of_block_[i]];
  }
  std::int32_t point_of_block(std::int64_t i) const {
    return pt_to_global_[pt_of_block_[i]];
  }

  void set_zero() { std::fill(blocks_.begin(), blocks_.end(), Scalar(0)); }

  /// out = E_k^T x: for each touched point, in ascending local order,
  /// accumulate block^T * x[camera] over its blocks in edge order.
  void apply_transpose(std::span<const Scalar> x, std::span<Scalar> out,
                       WorkCounters* counters = nullptr) const {
    if (static_cast<std::int64_t>(x.size()) != camera_dim() ||
        static_cast<std::int64_t>(out.size()) != point_dim())
      throw ShapeError("E^T apply: dimension mismatch");
    std::fill(out.begin(), out.end(), Scalar(0));
    const std::int32_t num_local_pts =
        static_cast<std::int32_t>(pt_to_global_.size());
    for (std::int32_t p = 0; p < num_local_pts; ++p) {
      Eigen::Matrix<Scalar, kPointParams, 1> acc =
          Eigen::Matrix<Scalar, kPointParams, 1>::Zero();
      for (std::int64_t idx = pt_ptr_[p]; idx < pt_ptr_[p + 1]; ++idx) {
        const std::int64_t b = pt_blocks_[idx];
        const std::int32_t cam = cam_to_global_[cam_of_block_[b]];
        Eigen::Map<const Eigen::Matrix<Scalar, kCameraParams, 1>> xc(
            x.data() + static_cast<std::size_t>(cam) * kCameraParams);
        acc.noalias() += block(b).transpose() * xc;
      }
      Eigen::Map<Eigen::Matrix<Scalar, kPointParams, 1>>(
          out.data() + static_cast<std::size_t>(pt_to_global_[p]) *
                           kPointParams) = acc;
    }
    if (counters)
      counters->edge_block_ops += static_cast<std::uint64_t>(blocks());
  }

  /// out = E_k b: for each touched camera, in ascending local order,
  /// accumulate block * b[point] over its blocks in edge order.
  void apply(std::span<const Scalar> b_pt, std::span<Scalar> out,
             WorkCounters* counters = nullptr) const {
    if (static_cast<std::int64_t>(b_pt.size()) != point_dim() ||
        static_cast<std::int64_t>(out.size()) != camera_dim())
      throw ShapeError("E apply: dimension mismatch");
    std::fill(out.begin(), out.end(), Scalar(0));
    const std::int32_t num_local_cams =
        static_cast<std::int32_t>(cam_to_global_.size());
    for (std::int32_t c = 0; c < num_local_cams; ++c) {
      Eigen::Matrix<Scalar, kCameraParams, 1> acc =
          Eigen::Matrix<Scalar, kCameraParams, 1>::Zero();
      for (std::int64_t idx = cam_ptr_[c]; idx < cam_ptr_[c + 1]; ++idx) {
        const std::int64_t b = cam_blocks_[idx];
        const std::int32_t pt = pt_to_global_[pt_of_block_[b]];
        Eigen::Map<const Eigen::Matrix<Scalar, kPointParams, 1>> bp(
            b_pt.data() + static_cast<std::size_t>(pt) * kPointParams);
        acc.noalias() += block(b) * bp;
      }
      Eigen::Map<Eigen::Matrix<Scalar, kCameraParams, 1>>(
          out.data() + static_cast<std::size_t>(cam_to_global_[c]) *
                           kCameraParams) = acc;
    }
    if (counters)
      counters->edge_block_ops += static_cast<std::uint64_t>(blocks());
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> apply_transpose(
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x) const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(point_dim());
    apply_transpose(std::span<const Scalar>(x.data(), x.size()),
                    std::span<Scalar>(out.data(), out.size()));
    return out;
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> apply(
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& b) const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(camera_dim());
    apply(std::span<const Scalar>(b.data(), b.size()),
          std::span<Scalar>(out.data(), out.size()));
    return out;
  }

 private:
  // Counting-sort grouping; within each group the block ids keep ascending
  // edge order, which fixes the accumulation order.
  static void build_groups(const std::vector<std::int32_t>& key,
                           std::int32_t num_groups,
                           std::vector<std::int64_t>& ptr,
                           std::vector<std::int64_t>& ids) {
    ptr.assign(static_cast<std::size_t>(num_groups) + 1, 0);
    for (std::int32_t k : key) ++ptr[k + 1];
    for (std::int32_t g = 0; g < num_groups; ++g) ptr[g + 1] += ptr[g];
    ids.resize(key.size());
    std::vector<std::int64_t> cursor(ptr.begin(), ptr.end() - 1);
    for (std::size_t i = 0; i < key.size(); ++i)
      ids[cursor[key[i]]++] = static_cast<std::int64_t>(i);
  }

  std::int32_t num_cameras_ = 0;
  std::int32_t num_points_ = 0;
  std::vector<std::int32_t> cam_to_global_, pt_to_global_;
  std::vector<std::int32_t> cam_of_block_, pt_of_block_;  // local ids
  std::vector<Scalar> blocks_;
  std::vector<std::int64_t> cam_ptr_, cam_blocks_;  // group by camera
  std::vector<std::int64_t> pt_ptr_, pt_blocks_;    // group by point
};

/// One worker's share of the normal equations: full-size diagonal blocks
/// B_k (camera) and C_k (point), the partition's coupling blocks E_k, and the
/// right-hand-side pair (v_k, w_k). B_k/C_k/v_k/w_k span the whole problem
/// (zero where the partition touches nothing) so they can be all-reduced.
template <typename Scalar>
struct PartitionedHessian {
  BlockDiagonal<Scalar, kCameraParams> B;
  BlockDiagonal<Scalar, kPointParams> C;
  EdgeBlockMatrix<Scalar> E;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v, w;

  PartitionedHessian() = default;
  template <typename S2>
  PartitionedHessian(const BAProblem<S2>& problem,
                     const EdgePartition& partition)
      : E(problem, partition) {
    B.resize(problem.num_cameras());
    C.resize(problem.num_points());
    v = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(E.camera_dim());
    w = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(E.point_dim());
  }
};

/// Gauss-Newton assembly of one partition's contribution, accumulated in the
/// partition's edge order:
///   B_k[c] += w J_cam^T J_cam,   C_k[p] += w J_pt^T J_pt,
///   E_k[e]  = w J_cam^T J_pt,    v_k[c] -= w J_cam^T r,  w_k[p] -= w J_pt^T r.
template <typename Scalar>
void assemble_local(const EdgeJacobianBatch<Scalar>& batch,
                    const EdgeEvaluator<Scalar>& evaluator,
                    PartitionedHessian<Scalar>& out) {
  const std::int64_t n = batch.size();
  if (n != evaluator.num_edges())
    throw ShapeError("assemble: batch does not match partition");
  out.B.set_zero();
  out.C.set_zero();
  out.E.set_zero();
  out.v.setZero();
  out.w.setZero();
  const auto cam_ids = evaluator.camera_ids();
  const auto pt_ids = evaluator.point_ids();
  const auto weights = evaluator.weights();
  for (std::int64_t e = 0; e < n; ++e) {
    const auto jc = batch.camera_jacobian(e);
    const auto jp = batch.point_jacobian(e);
    const auto r = batch.residual(e);
    const Scalar wgt = weights[e];
    const std::int32_t c = cam_ids[e];
    const std::int32_t p = pt_ids[e];
    out.B.block(c).noalias() += wgt * (jc.transpose() * jc);
    out.C.block(p).noalias() += wgt * (jp.transpose() * jp);
    out.E.block(e).noalias() = wgt * (jc.transpose() * jp);
    out.v.template segment<kCameraParams>(c * kCameraParams).noalias() -=
        wgt * (jc.transpose() * r);
    out.w.template segment<kPointParams>(p * kPointParams).noalias() -=
        wgt * (jp.transpose() * r);
  }
}

/// One-shot convenience assembly for a partition at a given state.
template <typename Scalar>
PartitionedHessian<Scalar> assemble_local(const BAProblem<Scalar>& problem,
                                          const EdgePartition& partition,
                                          std::span<const Scalar> x_c,
                                          std::span<const Scalar> x_p) {
  EdgeEvaluator<Scalar> evaluator(problem, partition);
  PartitionedHessian<Scalar> h(problem, partition);
  assemble_local(evaluator.linearize(x_c, x_p), evaluator, h);
  return h;
}

}  // namespace dba
