#pragma once

// Slice poses, Euler rotations, the normalized slice reference grid, and the
// sinusoidal positional encoding. Every routine exists in a plain ("fast")
// form for inference/evaluation and, where gradients are needed, a taped form
// that records onto an ad::Tape.
//
// Conventions, used consistently everywhere:
//   - world volume is the cube [-1,1]^3
//   - rotation R = Rz(rz) * Ry(ry) * Rx(rx), angles in radians
//   - a slice pixel (row, col) of an HxW image maps to the reference plane
//     point (x, y, 0) with x = 2*col/(W-1) - 1, y = 2*row/(H-1) - 1,
//     flattened row-major: p = row*W + col
//   - world point = R * (x, y, 0) + T

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/autodiff.hpp"
#include "ivol/util.hpp"

namespace ivol {

// 6-DoF rigid placement of a slice: Euler angles (rx, ry, rz) and
// translation (tx, ty, tz) in normalized world units.
struct SlicePose {
  std::array<double, 3> euler{0.0, 0.0, 0.0};
  std::array<double, 3> trans{0.0, 0.0, 0.0};
  bool operator==(const SlicePose&) const = default;
};

// Row-major 3x3 rotation matrix.
struct Mat3 {
  std::array<double, 9> m{};
  double operator()(int r, int c) const { return m[r * 3 + c]; }
  std::array<double, 3> apply(double x, double y, double z) const {
    return {m[0] * x + m[1] * y + m[2] * z,
            m[3] * x + m[4] * y + m[5] * z,
            m[6] * x + m[7] * y + m[8] * z};
  }
};

inline Mat3 euler_to_matrix(double rx, double ry, double rz) {
  double sa, ca, sb, cb, sc, cc;
  sincos_both(rx, &sa, &ca);
  sincos_both(ry, &sb, &cb);
  sincos_both(rz, &sc, &cc);
  Mat3 r;
  r.m = {cc * cb, cc * sb * sa - sc * ca, sc * sa + cc * sb * ca,
         sc * cb, cc * ca + sc * sb * sa, sc * sb * ca - cc * sa,
         -sb,     cb * sa,                cb * ca};
  return r;
}

inline Mat3 euler_to_matrix(const std::array<double, 3>& e) {
  return euler_to_matrix(e[0], e[1], e[2]);
}

// Normalized in-plane coordinates of every pixel of an HxW slice, flattened
// row-major. The plane's z coordinate is identically zero and not stored.
struct PlaneGrid {
  int h = 0;
  int w = 0;
  std::vector<double> xs;  // per pixel, length h*w
  std::vector<double> ys;
  int pixels() const { return h * w; }
};

inline PlaneGrid reference_grid(int h, int w) {
  if (h < 1 || w < 1)
    throw std::invalid_argument("reference_grid: dimensions must be positive, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  PlaneGrid g;
  g.h = h;
  g.w = w;
  g.xs.resize(static_cast<std::size_t>(h) * w);
  g.ys.resize(g.xs.size());
  for (int row = 0; row < h; ++row) {
    const double y = (h == 1) ? 0.0 : 2.0 * row / (h - 1) - 1.0;
    for (int col = 0; col < w; ++col) {
      const double x = (w == 1) ? 0.0 : 2.0 * col / (w - 1) - 1.0;
      const std::size_t p = static_cast<std::size_t>(row) * w + col;
      g.xs[p] = x;
      g.ys[p] = y;
    }
  }
  return g;
}

// World positions of every grid pixel under `pose`, AoS layout (x,y,z) per
// point, row-major pixel order.
inline std::vector<double> plane_to_world(const PlaneGrid& grid, const SlicePose& pose) {
  const Mat3 r = euler_to_matrix(pose.euler);
  const int n = grid.pixels();
  std::vector<double> pts(static_cast<std::size_t>(n) * 3);
  for (int p = 0; p < n; ++p) {
    const double x = grid.xs[p], y = grid.ys[p];
    pts[3 * p + 0] = r.m[0] * x + r.m[1] * y + pose.trans[0];
    pts[3 * p + 1] = r.m[3] * x + r.m[4] * y + pose.trans[1];
    pts[3 * p + 2] = r.m[6] * x + r.m[7] * y + pose.trans[2];
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Positional encoding (axis-major, frequency-minor, sin before cos):
// gamma(n) per axis = [sin(2^0 pi n), cos(2^0 pi n), ..., sin(2^{L-1} pi n),
// cos(2^{L-1} pi n)], concatenated for x, y, z -> 6L features per point.
// With the encoding disabled the raw (x, y, z) triple is the feature vector.

inline int encode_dim(int levels, bool use_encoding = true) {
  return use_encoding ? 6 * levels : 3;
}

// Encodes AoS points (n x 3) into an n x encode_dim(levels) row-major matrix.
inline void positional_encode(std::span<const double> points, int levels,
                              std::vector<double>& out, bool use_encoding = true) {
  if (points.size() % 3 != 0)
    throw std::invalid_argument("positional_encode: point array length not a multiple of 3");
  const int n = static_cast<int>(points.size() / 3);
  const int dim = encode_dim(levels, use_encoding);
  out.resize(static_cast<std::size_t>(n) * dim);
  if (!use_encoding) {
    std::copy(points.begin(), points.end(), out.begin());
    return;
  }
  if (levels < 1) throw std::invalid_argument("positional_encode: levels must be >= 1");
  for (int p = 0; p < n; ++p) {
    double* row = out.data() + static_cast<std::size_t>(p) * dim;
    for (int axis = 0; axis < 3; ++axis) {
      const double v = points[3 * p + axis];
      double* block = row + axis * 2 * levels;
      double freq = std::numbers::pi;
      for (int l = 0; l < levels; ++l) {
        sincos_both(freq * v, &block[2 * l], &block[2 * l + 1]);
        freq *= 2.0;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Taped variants. Pose parameters are six scalar nodes so each receives its
// own gradient; grid coordinates ride along as borrowed constants.

struct TapedPose {
  ad::NodeId rx, ry, rz, tx, ty, tz;
};

// Records the pose either as trainable leaves or as constants (when pose
// optimization is off, so no gradient ever forms for it).
inline TapedPose record_pose(ad::Tape& tape, const SlicePose& pose, bool trainable) {
  auto put = [&](double v) { return trainable ? tape.leaf(v) : tape.constant(v); };
  return {put(pose.euler[0]), put(pose.euler[1]), put(pose.euler[2]),
          put(pose.trans[0]), put(pose.trans[1]), put(pose.trans[2])};
}

// World coordinates of the grid under the taped pose as three Px1 columns.
// `grid` must outlive the tape generation (its arrays are borrowed).
struct TapedWorld {
  ad::NodeId x, y, z;
  int points;
};

inline TapedWorld plane_to_world_taped(ad::Tape& tape, const PlaneGrid& grid,
                                       const TapedPose& pose) {
  using ad::NodeId;
  const int n = grid.pixels();
  NodeId gx = tape.constant_ref(grid.xs.data(), {n, 1});
  NodeId gy = tape.constant_ref(grid.ys.data(), {n, 1});

  NodeId sa = tape.sin(pose.rx), ca = tape.cos(pose.rx);
  NodeId sb = tape.sin(pose.ry), cb = tape.cos(pose.ry);
  NodeId sc = tape.sin(pose.rz), cc = tape.cos(pose.rz);

  // R = Rz * Ry * Rx; only the first two columns act on (x, y, 0).
  NodeId r00 = tape.mul(cc, cb);
  NodeId r01 = tape.sub(tape.mul(tape.mul(cc, sb), sa), tape.mul(sc, ca));
  NodeId r10 = tape.mul(sc, cb);
  NodeId r11 = tape.add(tape.mul(cc, ca), tape.mul(tape.mul(sc, sb), sa));
  NodeId r20 = tape.sub(tape.constant(0.0), sb);
  NodeId r21 = tape.mul(cb, sa);

  NodeId wx = tape.add(tape.add(tape.mul(gx, r00), tape.mul(gy, r01)), pose.tx);
  NodeId wy = tape.add(tape.add(tape.mul(gx, r10), tape.mul(gy, r11)), pose.ty);
  NodeId wz = tape.add(tape.add(tape.mul(gx, r20), tape.mul(gy, r21)), pose.tz);
  return {wx, wy, wz, n};
}

// Px(6L) encoded feature matrix (or Px3 raw coordinates) on the tape.
inline ad::NodeId positional_encode_taped(ad::Tape& tape, const TapedWorld& world,
                                          int levels, bool use_encoding = true) {
  using ad::NodeId;
  const std::array<NodeId, 3> axes = {world.x, world.y, world.z};
  std::vector<NodeId> cols;
  if (!use_encoding) {
    cols.assign(axes.begin(), axes.end());
    return tape.concat_cols(cols);
  }
  if (levels < 1)
    throw std::invalid_argument("positional_encode_taped: levels must be >= 1");
  cols.reserve(static_cast<std::size_t>(6) * levels);
  for (NodeId axis : axes) {
    double freq = std::numbers::pi;
    for (int l = 0; l < levels; ++l) {
      ad::NodeId arg = tape.mul(axis, tape.constant(freq));
      cols.push_back(tape.sin(arg));
      cols.push_back(tape.cos(arg));
      freq *= 2.0;
    }
  }
  return tape.concat_cols(cols);
}

}  // namespace ivol
