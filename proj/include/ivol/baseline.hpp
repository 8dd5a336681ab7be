#pragma once

// The explicit comparison pipeline: scatter posed slice pixels into a 3D
// point cloud, reconstruct a voxel grid by inverse-distance-weighted
// interpolation over the k nearest pixels, and rigidly align one volume to
// another by maximizing NCC (used to make novel-view comparisons fair).

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ivol/geometry.hpp"
#include "ivol/metrics.hpp"
#include "ivol/util.hpp"
#include "ivol/volume.hpp"

namespace ivol {

struct PointCloud {
  std::vector<double> xyz;        // 3 per point
  std::vector<double> intensity;  // 1 per point
  std::size_t size() const { return intensity.size(); }
};

// Places every pixel of every slice at its world position under the slice's
// pose. Point order: slice-major, then row-major pixels, so positions match
// plane_to_world exactly.
inline PointCloud scatter(std::span<const SliceImage> images,
                          std::span<const SlicePose> poses) {
  if (images.size() != poses.size())
    throw std::invalid_argument("scatter: " + std::to_string(images.size()) +
                                " images vs " + std::to_string(poses.size()) + " poses");
  PointCloud cloud;
  int last_h = -1, last_w = -1;
  PlaneGrid grid;
  for (std::size_t s = 0; s < images.size(); ++s) {
    const SliceImage& img = images[s];
    if (img.h != last_h || img.w != last_w) {
      grid = reference_grid(img.h, img.w);
      last_h = img.h;
      last_w = img.w;
    }
    std::vector<double> pts = plane_to_world(grid, poses[s]);
    cloud.xyz.insert(cloud.xyz.end(), pts.begin(), pts.end());
    cloud.intensity.insert(cloud.intensity.end(), img.pix.begin(), img.pix.end());
  }
  return cloud;
}

// Reusable per-thread query state, so a const KdTree3 can serve several
// workers at once.
struct KnnScratch {
  std::vector<std::pair<double, int>> heap;  // max-heap on (distance^2, index)
};

// Static 3-D KD-tree over a point array. Median splits on the widest axis
// with (coordinate, index) ordering, so structure and query results are
// deterministic; k-NN results are identical to exhaustive search with ties
// broken by lowest point index.
class KdTree3 {
 public:
  explicit KdTree3(std::span<const double> xyz) : pts_(xyz) {
    if (xyz.size() % 3 != 0)
      throw std::invalid_argument("KdTree3: point array length not a multiple of 3");
    const int n = static_cast<int>(xyz.size() / 3);
    order_.resize(n);
    for (int i = 0; i < n; ++i) order_[i] = i;
    nodes_.reserve(n);
    root_ = build(0, n);
  }

  int size() const { return static_cast<int>(order_.size()); }

  // Indices of the k nearest points, sorted by (distance^2, index).
  void knn(const std::array<double, 3>& q, int k, KnnScratch& scratch,
           std::vector<int>& out) const {
    if (k < 1) throw std::invalid_argument("KdTree3: k must be >= 1");
    k = std::min(k, size());
    scratch.heap.clear();
    search(root_, q, k, scratch.heap);
    std::sort(scratch.heap.begin(), scratch.heap.end());
    out.resize(k);
    for (int i = 0; i < k; ++i) out[i] = scratch.heap[i].second;
  }

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(int lo, int hi) {
    if (lo >= hi) return -1;
    // Split on the widest axis of this subset's bounding box.
    std::array<double, 3> mn{}, mx{};
    mn.fill(std::numeric_limits<double>::infinity());
    mx.fill(-std::numeric_limits<double>::infinity());
    for (int i = lo; i < hi; ++i)
      for (int a = 0; a < 3; ++a) {
        const double v = pts_[3 * order_[i] + a];
        mn[a] = std::min(mn[a], v);
        mx[a] = std::max(mx[a], v);
      }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (mx[a] - mn[a] > mx[axis] - mn[axis]) axis = a;

    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](int a, int b) {
                       const double va = pts_[3 * a + axis], vb = pts_[3 * b + axis];
                       return va != vb ? va < vb : a < b;
                     });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[mid], axis, -1, -1});
    const int left = build(lo, mid);
    const int right = build(mid + 1, hi);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(int node, const std::array<double, 3>& q, int k,
              std::vector<std::pair<double, int>>& heap) const {
    if (node < 0) return;
    const Node& n = nodes_[node];
    const double* p = pts_.data() + 3 * n.point;
    const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
    const std::pair<double, int> cand{dx * dx + dy * dy + dz * dz, n.point};
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end());
    } else if (cand < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end());
    }

    const double delta = q[n.axis] - p[n.axis];
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search(near, q, k, heap);
    // Descend the far side unless the splitting plane is strictly farther
    // than the current k-th distance (ties may hide lower-index points).
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().first)
      search(far, q, k, heap);
  }

  std::span<const double> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

inline constexpr double kIdwDistanceFloor = 1e-6;

// Voxel-grid reconstruction: per voxel center, the inverse-distance-weighted
// average of the k nearest cloud points, w = 1/(d + 1e-6).
inline VoxelVolume idw_reconstruct(const PointCloud& cloud, int side, int k = 20) {
  if (cloud.size() < static_cast<std::size_t>(k))
    throw std::invalid_argument("idw_reconstruct: cloud has " +
                                std::to_string(cloud.size()) + " points, need >= " +
                                std::to_string(k));
  const KdTree3 tree(cloud.xyz);
  VoxelVolume vol(side);
  const std::int64_t total = static_cast<std::int64_t>(side) * side * side;
  parallel_for(total, [&](std::int64_t lo, std::int64_t hi) {
    KnnScratch scratch;
    std::vector<int> idx;
    for (std::int64_t v = lo; v < hi; ++v) {
      const int i = static_cast<int>(v / (side * side));
      const int j = static_cast<int>((v / side) % side);
      const int k3 = static_cast<int>(v % side);
      const auto c = vol.voxel_center(i, j, k3);
      tree.knn(c, k, scratch, idx);
      double wsum = 0.0, vsum = 0.0;
      for (int pid : idx) {
        const double dx = cloud.xyz[3 * pid] - c[0];
        const double dy = cloud.xyz[3 * pid + 1] - c[1];
        const double dz = cloud.xyz[3 * pid + 2] - c[2];
        const double w =
            1.0 / (std::sqrt(dx * dx + dy * dy + dz * dz) + kIdwDistanceFloor);
        wsum += w;
        vsum += w * cloud.intensity[pid];
      }
      vol.vox[static_cast<std::size_t>(v)] = vsum / wsum;
    }
  });
  return vol;
}

// ---------------------------------------------------------------------------
// Rigid alignment by NCC maximization. The returned transform is a pull-back:
// aligned(x) = moving(R x + T), so `transform` maps fixed-frame coordinates
// into the moving volume.

struct RigidAlignResult {
  VoxelVolume aligned;
  SlicePose transform;
  double ncc_identity = 0.0;
  double ncc_aligned = 0.0;
};

// Resamples `moving` through the pull-back transform onto its own lattice.
inline VoxelVolume resample_volume(const VoxelVolume& moving, const SlicePose& pose) {
  const Mat3 r = euler_to_matrix(pose.euler);
  VoxelVolume out(moving.side);
  for (int i = 0; i < out.side; ++i)
    for (int j = 0; j < out.side; ++j)
      for (int k = 0; k < out.side; ++k) {
        const auto c = out.voxel_center(i, j, k);
        const auto m = r.apply(c[0], c[1], c[2]);
        out.at(i, j, k) = moving.sample_world(m[0] + pose.trans[0], m[1] + pose.trans[1],
                                              m[2] + pose.trans[2]);
      }
  return out;
}

namespace detail {

// NCC of fixed-vs-transformed-moving on a strided sample lattice; -2 when
// the overlap is degenerate (e.g. everything out of bounds).
class AlignScorer {
 public:
  AlignScorer(const VoxelVolume& moving, const VoxelVolume& fixed, int stride)
      : moving_(moving) {
    for (int i = 0; i < fixed.side; i += stride)
      for (int j = 0; j < fixed.side; j += stride)
        for (int k = 0; k < fixed.side; k += stride) {
          const auto c = fixed.voxel_center(i, j, k);
          coords_.push_back(c);
          fixed_vals_.push_back(fixed.at(i, j, k));
        }
    moved_vals_.resize(fixed_vals_.size());
  }

  double score(const SlicePose& pose) const {
    const Mat3 r = euler_to_matrix(pose.euler);
    for (std::size_t s = 0; s < coords_.size(); ++s) {
      const auto& c = coords_[s];
      const auto m = r.apply(c[0], c[1], c[2]);
      moved_vals_[s] = moving_.sample_world(m[0] + pose.trans[0], m[1] + pose.trans[1],
                                            m[2] + pose.trans[2]);
    }
    try {
      return ncc(fixed_vals_, moved_vals_);
    } catch (const std::runtime_error&) {
      return -2.0;  // constant overlap, treat as worst
    }
  }

 private:
  const VoxelVolume& moving_;
  std::vector<std::array<double, 3>> coords_;
  std::vector<double> fixed_vals_;
  mutable std::vector<double> moved_vals_;
};

}  // namespace detail

inline RigidAlignResult rigid_align(const VoxelVolume& moving, const VoxelVolume& fixed) {
  if (moving.side != fixed.side)
    throw std::invalid_argument("rigid_align: side mismatch, " +
                                std::to_string(moving.side) + " vs " +
                                std::to_string(fixed.side));
  auto constant = [](const VoxelVolume& v) {
    const auto [lo, hi] = std::minmax_element(v.vox.begin(), v.vox.end());
    return *lo == *hi;
  };
  if (constant(moving) || constant(fixed))
    throw std::runtime_error("rigid_align: degenerate constant volume");

  const int coarse_stride = std::max(1, fixed.side / 16);
  detail::AlignScorer coarse(moving, fixed, coarse_stride);

  SlicePose best;
  double best_score = coarse.score(best);

  // Stage 1: rotation-only grid, +-0.3 rad in 0.05 steps.
  for (int ax = -6; ax <= 6; ++ax)
    for (int ay = -6; ay <= 6; ++ay)
      for (int az = -6; az <= 6; ++az) {
        SlicePose p;
        p.euler = {ax * 0.05, ay * 0.05, az * 0.05};
        const double s = coarse.score(p);
        if (s > best_score) {
          best_score = s;
          best = p;
        }
      }

  // Stage 2: translation grid at the best rotation, +-10% of the cube extent
  // (0.2 in normalized units) in 2.5% steps.
  {
    SlicePose p = best;
    for (int tx = -4; tx <= 4; ++tx)
      for (int ty = -4; ty <= 4; ++ty)
        for (int tz = -4; tz <= 4; ++tz) {
          p.trans = {tx * 0.05, ty * 0.05, tz * 0.05};
          const double s = coarse.score(p);
          if (s > best_score) {
            best_score = s;
            best = p;
          }
        }
  }

  // Stage 3: pattern search over all six parameters on a finer lattice,
  // shrinking the step four times.
  const int fine_stride = std::max(1, fixed.side / 32);
  detail::AlignScorer fine(moving, fixed, fine_stride);
  best_score = fine.score(best);
  double angle_step = 0.025, trans_step = 0.025;
  for (int halving = 0; halving < 4; ++halving) {
    bool improved = true;
    while (improved) {
      improved = false;
      for (int axis = 0; axis < 6; ++axis)
        for (int sign = -1; sign <= 1; sign += 2) {
          SlicePose p = best;
          if (axis < 3)
            p.euler[axis] += sign * angle_step;
          else
            p.trans[axis - 3] += sign * trans_step;
          const double s = fine.score(p);
          if (s > best_score) {
            best_score = s;
            best = p;
            improved = true;
          }
        }
    }
    angle_step *= 0.5;
    trans_step *= 0.5;
  }

  // Full-resolution decision: never return less than the identity gives.
  RigidAlignResult result;
  result.ncc_identity = ncc(std::span<const double>(fixed.vox),
                            std::span<const double>(moving.vox));
  VoxelVolume candidate = resample_volume(moving, best);
  double cand_ncc = -2.0;
  try {
    cand_ncc = ncc(std::span<const double>(fixed.vox),
                   std::span<const double>(candidate.vox));
  } catch (const std::runtime_error&) {
  }
  if (cand_ncc >= result.ncc_identity) {
    result.aligned = std::move(candidate);
    result.transform = best;
    result.ncc_aligned = cand_ncc;
  } else {
    result.aligned = moving;
    result.transform = SlicePose{};
    result.ncc_aligned = result.ncc_identity;
  }
  return result;
}

}  // namespace ivol
