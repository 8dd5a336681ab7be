#pragma once

// Synthetic ground truth and acquisition simulation: procedural phantoms,
// freehand-style slice sweeps about the volume's y axis, and the pose-noise
// model that stands in for an external pose-prediction network.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "ivol/geometry.hpp"
#include "ivol/metrics.hpp"
#include "ivol/util.hpp"
#include "ivol/volume.hpp"

namespace ivol {

struct Phantom {
  VoxelVolume volume;
  std::string descriptor;  // generator parameters, recorded in volume files
};

// Nested smooth ellipsoidal shells of alternating intensity, jittered in
// axis lengths, centers and orientations per seed, multiplied by band-limited
// speckle (a coarse random lattice upsampled trilinearly), then rescaled to
// exactly [0,1].
inline Phantom generate_phantom(int side, std::uint64_t seed) {
  if (side < 16) throw std::invalid_argument("generate_phantom: side must be >= 16");
  Rng rng(seed);

  constexpr int kShells = 4;
  constexpr double kSpeckleAmp = 0.25;
  constexpr int kSpeckleGrid = 9;
  constexpr double kEdgeSharpness = 9.0;
  const std::array<double, kShells> base_radius = {0.82, 0.62, 0.42, 0.22};
  const std::array<double, kShells> shell_value = {0.75, 0.3, 0.8, 0.15};

  struct Shell {
    Mat3 rot;
    std::array<double, 3> center;
    std::array<double, 3> inv_axis;
    double value;
  };
  std::array<Shell, kShells> shells;
  for (int s = 0; s < kShells; ++s) {
    Shell& sh = shells[s];
    for (double& c : sh.center) c = rng.uniform(-0.07, 0.07);
    for (int a = 0; a < 3; ++a)
      sh.inv_axis[a] = 1.0 / (base_radius[s] * rng.uniform(0.85, 1.15));
    sh.rot = euler_to_matrix(rng.uniform(-std::numbers::pi, std::numbers::pi),
                             rng.uniform(-std::numbers::pi, std::numbers::pi),
                             rng.uniform(-std::numbers::pi, std::numbers::pi));
    sh.value = shell_value[s];
  }

  VoxelVolume speckle(kSpeckleGrid);
  for (double& v : speckle.vox) v = rng.uniform(1.0 - kSpeckleAmp, 1.0 + kSpeckleAmp);

  VoxelVolume vol(side);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      for (int k = 0; k < side; ++k) {
        const auto [x, y, z] = vol.voxel_center(i, j, k);
        double v = 0.05;  // background
        for (const Shell& sh : shells) {
          const auto local = sh.rot.apply(x - sh.center[0], y - sh.center[1],
                                          z - sh.center[2]);
          const double rho = std::sqrt(
              local[0] * local[0] * sh.inv_axis[0] * sh.inv_axis[0] +
              local[1] * local[1] * sh.inv_axis[1] * sh.inv_axis[1] +
              local[2] * local[2] * sh.inv_axis[2] * sh.inv_axis[2]);
          const double inside = 1.0 / (1.0 + std::exp(-kEdgeSharpness * (1.0 - rho)));
          v += (sh.value - v) * inside;
        }
        v *= speckle.sample_world(x, y, z);
        vol.at(i, j, k) = v;
      }

  const auto [lo, hi] = std::minmax_element(vol.vox.begin(), vol.vox.end());
  if (*hi <= *lo)
    throw std::runtime_error("generate_phantom: degenerate constant phantom");
  const double inv = 1.0 / (*hi - *lo);
  const double mn = *lo;
  for (double& v : vol.vox) v = (v - mn) * inv;

  Phantom ph;
  ph.volume = std::move(vol);
  ph.descriptor = "phantom side=" + std::to_string(side) + " seed=" +
                  std::to_string(seed) + " shells=" + std::to_string(kShells) +
                  " speckle=" + format_double(kSpeckleAmp);
  return ph;
}

// One simulated sweep: N slice images with their true poses. The noisy pose
// list starts out identical; perturb_poses fills it in.
struct AcquisitionSet {
  std::vector<SliceImage> images;
  std::vector<SlicePose> true_poses;
  std::vector<SlicePose> noisy_poses;
  double sigma_angle = 0.0;        // requested mean angle error, radians
  double sigma_translation = 0.0;  // requested mean distance error, pixels
  std::uint64_t noise_seed = 0;
  int volume_side = 0;  // source volume side, fixes the pixel scale

  std::size_t size() const { return images.size(); }
};

// Simulates a freehand sweep: primary rotations about the y axis at jittered
// multiples of pi/N, small tilts about x and z, no translation. Slices are
// h x w (defaulting to the volume side) sampled trilinearly; the slice plane
// spans the volume's full [-1,1] extent.
inline AcquisitionSet sample_slices(const VoxelVolume& vol, int n, double tilt_jitter,
                                    std::uint64_t seed, int h = 0, int w = 0) {
  if (n < 1) throw std::invalid_argument("sample_slices: need at least one slice");
  if (h == 0) h = vol.side;
  if (w == 0) w = vol.side;
  Rng rng(seed);
  AcquisitionSet set;
  set.volume_side = vol.side;
  set.images.reserve(n);
  set.true_poses.reserve(n);
  for (int i = 0; i < n; ++i) {
    SlicePose pose;
    const double primary = i * std::numbers::pi / n + rng.uniform(-tilt_jitter, tilt_jitter);
    const double tilt_x = rng.uniform(-tilt_jitter, tilt_jitter);
    const double tilt_z = rng.uniform(-tilt_jitter, tilt_jitter);
    pose.euler = {tilt_x, primary, tilt_z};
    set.true_poses.push_back(pose);
    set.images.push_back(sample_plane(vol, pose, h, w));
  }
  set.noisy_poses = set.true_poses;
  return set;
}

enum class NoiseMode {
  kIndependent,  // i.i.d. per slice (the default model)
  kRandomWalk,   // AR(1)-correlated across the sweep; robustness studies only,
                 // not a claim about any external pose predictor
};

// Applies zero-mean Gaussian pose noise. sigma_angle and sigma_translation
// are calibrated targets for the *measured mean errors*: per-axis stds are
// sigma_angle*sqrt(pi/2) and sigma_translation*(2/side)*sqrt(pi/8), which
// make the expected mean-abs-per-axis angle error and the expected
// translation norm (in pixels) equal the requested sigmas.
inline std::vector<SlicePose> perturb_poses(std::span<const SlicePose> poses,
                                            double sigma_angle,
                                            double sigma_translation_px,
                                            int volume_side, std::uint64_t seed,
                                            NoiseMode mode = NoiseMode::kIndependent) {
  if (sigma_angle < 0 || sigma_translation_px < 0)
    throw std::invalid_argument("perturb_poses: sigma must be >= 0");
  std::vector<SlicePose> out(poses.begin(), poses.end());
  const double angle_std = sigma_angle * std::sqrt(std::numbers::pi / 2.0);
  const double trans_std = sigma_translation_px * (2.0 / volume_side) *
                           std::sqrt(std::numbers::pi / 8.0);
  if (angle_std == 0.0 && trans_std == 0.0) return out;

  Rng rng(seed);
  constexpr double kWalkRho = 0.9;
  std::array<double, 6> walk{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::array<double, 6> draw;
    for (int c = 0; c < 6; ++c) {
      const double s = c < 3 ? angle_std : trans_std;
      double g = (s == 0.0) ? 0.0 : rng.normal(0.0, s);
      if (mode == NoiseMode::kRandomWalk) {
        // AR(1) with the same marginal std, correlated along the sweep.
        walk[c] = (i == 0) ? g : kWalkRho * walk[c] + std::sqrt(1.0 - kWalkRho * kWalkRho) * g;
        g = walk[c];
      }
      draw[c] = g;
    }
    if (angle_std > 0.0)
      for (int c = 0; c < 3; ++c) out[i].euler[c] += draw[c];
    if (trans_std > 0.0)
      for (int c = 0; c < 3; ++c) out[i].trans[c] += draw[c + 3];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Acquisition directory: poses.csv plus slice_0000.pgm, slice_0001.pgm, ...

inline std::string slice_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "slice_%04d.pgm", index);
  return buf;
}

inline void write_poses_csv(const std::string& path, const AcquisitionSet& set) {
  std::string csv =
      "index,true_rx,true_ry,true_rz,true_tx,true_ty,true_tz,"
      "noisy_rx,noisy_ry,noisy_rz,noisy_tx,noisy_ty,noisy_tz\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    csv += std::to_string(i);
    const SlicePose& t = set.true_poses[i];
    const SlicePose& n = set.noisy_poses[i];
    for (double v : {t.euler[0], t.euler[1], t.euler[2], t.trans[0], t.trans[1],
                     t.trans[2], n.euler[0], n.euler[1], n.euler[2], n.trans[0],
                     n.trans[1], n.trans[2]})
      csv += "," + format_double(v);
    csv += "\n";
  }
  atomic_write_file(path, csv);
}

inline void read_poses_csv(const std::string& path, AcquisitionSet& set) {
  const std::string data = read_file(path);
  const std::string ctx = "poses " + path;
  std::size_t at = 0;
  int line_no = 0;
  set.true_poses.clear();
  set.noisy_poses.clear();
  while (at < data.size()) {
    std::size_t nl = data.find('\n', at);
    if (nl == std::string::npos) nl = data.size();
    const std::string line = data.substr(at, nl - at);
    at = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line.rfind("index,true_rx", 0) != 0)
        throw std::runtime_error(ctx + ": unexpected header row");
      continue;
    }
    std::array<double, 13> f{};
    std::size_t pos = 0;
    for (int c = 0; c < 13; ++c) {
      std::size_t comma = line.find(',', pos);
      const std::string cell =
          line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (cell.empty() || (comma == std::string::npos && c != 12))
        throw std::runtime_error(ctx + ": line " + std::to_string(line_no) +
                                 " has too few fields");
      try {
        f[c] = std::stod(cell);
      } catch (const std::exception&) {
        throw std::runtime_error(ctx + ": line " + std::to_string(line_no) +
                                 " field " + std::to_string(c) + " is not a number");
      }
      pos = comma == std::string::npos ? line.size() : comma + 1;
    }
    if (static_cast<std::size_t>(f[0]) != set.true_poses.size())
      throw std::runtime_error(ctx + ": line " + std::to_string(line_no) +
                               " has out-of-order index");
    SlicePose t, n;
    t.euler = {f[1], f[2], f[3]};
    t.trans = {f[4], f[5], f[6]};
    n.euler = {f[7], f[8], f[9]};
    n.trans = {f[10], f[11], f[12]};
    set.true_poses.push_back(t);
    set.noisy_poses.push_back(n);
  }
  if (set.true_poses.empty())
    throw std::runtime_error(ctx + ": no pose rows");
}

inline void save_acquisition(const std::string& dir, const AcquisitionSet& set) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_poses_csv((fs::path(dir) / "poses.csv").string(), set);
  for (std::size_t i = 0; i < set.size(); ++i)
    write_pgm((fs::path(dir) / slice_filename(static_cast<int>(i))).string(),
              set.images[i]);
}

inline AcquisitionSet load_acquisition(const std::string& dir) {
  namespace fs = std::filesystem;
  AcquisitionSet set;
  read_poses_csv((fs::path(dir) / "poses.csv").string(), set);
  set.images.reserve(set.true_poses.size());
  for (std::size_t i = 0; i < set.true_poses.size(); ++i)
    set.images.push_back(
        read_pgm((fs::path(dir) / slice_filename(static_cast<int>(i))).string()));
  return set;
}

}  // namespace ivol
