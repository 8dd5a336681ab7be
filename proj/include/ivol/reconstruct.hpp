#pragma once

// Implicit reconstruction: jointly fits the sine network (and optionally the
// slice poses) to the observed slices by gradient descent on 1 - SSIM, and
// renders slices/volumes from the fitted network.

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/autodiff.hpp"
#include "ivol/geometry.hpp"
#include "ivol/metrics.hpp"
#include "ivol/siren.hpp"
#include "ivol/util.hpp"
#include "ivol/volume.hpp"

namespace ivol {

struct TrainConfig {
  int epochs = 10000;
  double network_lr = 1e-3;
  double pose_lr = 1e-3;
  double lr_decay = 0.97;      // multiplied into both rates every interval
  int lr_decay_interval = 100; // epochs
  int slices_per_step = 4;
  bool joint_optimize = false;
  int pose_warmup = 0;         // epochs before pose updates start (joint only)
  int levels = 10;             // positional encoding depth
  bool use_encoding = true;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Adam. One state per parameter tensor; the step counter lives in the state,
// so tensors that skip steps (poses during warm-up, poses outside the current
// group) keep correct bias correction when they resume.

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) +
                                " params vs " + std::to_string(grads.size()) + " grads");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  } else if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state size mismatch");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g;
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g * g;
    params[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + kAdamEps);
  }
}

// ---------------------------------------------------------------------------

struct EpochLog {
  double mean_loss = 0.0;
  double network_lr = 0.0;
  double pose_lr = 0.0;
};

struct ReconstructionState {
  ImplicitVolume net;
  std::vector<SlicePose> poses;
  std::vector<EpochLog> history;  // one entry per completed epoch
};

// Per-epoch loss log; epochs are 1-based in the file.
inline void write_loss_csv(const std::string& path, std::span<const EpochLog> history) {
  std::string csv = "epoch,mean_loss,network_lr,pose_lr\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    csv += std::to_string(e + 1);
    csv += ',';
    csv += format_double(history[e].mean_loss);
    csv += ',';
    csv += format_double(history[e].network_lr);
    csv += ',';
    csv += format_double(history[e].pose_lr);
    csv += '\n';
  }
  atomic_write_file(path, csv);
}

// Fits the network (and, when joint_optimize is set, the poses) to the
// slices. One epoch is a full seeded-shuffle pass over all slices, grouped
// into steps of slices_per_step; the step loss is the mean of the per-slice
// SSIM losses, and parameters take one Adam step per step.
inline ReconstructionState train(std::span<const SliceImage> images,
                                 std::span<const SlicePose> initial_poses,
                                 const TrainConfig& cfg) {
  const int n = static_cast<int>(images.size());
  if (n < 1) throw std::invalid_argument("train: need at least one slice");
  if (images.size() != initial_poses.size())
    throw std::invalid_argument("train: " + std::to_string(images.size()) +
                                " images vs " + std::to_string(initial_poses.size()) +
                                " poses");
  for (int s = 1; s < n; ++s)
    if (images[s].h != images[0].h || images[s].w != images[0].w)
      throw std::invalid_argument(
          "train: slice 0 is " + std::to_string(images[0].h) + "x" +
          std::to_string(images[0].w) + " but slice " + std::to_string(s) + " is " +
          std::to_string(images[s].h) + "x" + std::to_string(images[s].w));
  if (cfg.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (cfg.network_lr <= 0.0 || cfg.pose_lr <= 0.0)
    throw std::invalid_argument("train: learning rates must be positive");
  if (cfg.lr_decay <= 0.0 || cfg.lr_decay > 1.0)
    throw std::invalid_argument("train: lr_decay must lie in (0, 1]");
  if (cfg.lr_decay_interval < 1)
    throw std::invalid_argument("train: lr_decay_interval must be >= 1");
  if (cfg.slices_per_step < 1)
    throw std::invalid_argument("train: slices_per_step must be >= 1");
  if (cfg.pose_warmup < 0)
    throw std::invalid_argument("train: pose_warmup must be >= 0");

  ReconstructionState state;
  state.net = ImplicitVolume::init(cfg.levels, cfg.seed, cfg.use_encoding);
  state.poses.assign(initial_poses.begin(), initial_poses.end());
  state.history.reserve(cfg.epochs);

  const PlaneGrid grid = reference_grid(images[0].h, images[0].w);
  Rng order_rng(cfg.seed ^ 0xd1b54a32d192ed03ull);  // decorrelated from net init

  const int layers = state.net.layers();
  std::vector<AdamState> w_state(layers), b_state(layers);
  std::vector<AdamState> pose_state(n);

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  ad::Tape tape;
  std::vector<ad::NodeId> slice_loss;
  std::vector<TapedPose> taped_poses;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double decay =
        std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.lr_decay_interval));
    const double net_lr = cfg.network_lr * decay;
    const double pose_lr = cfg.pose_lr * decay;
    const bool poses_trainable = cfg.joint_optimize && epoch >= cfg.pose_warmup;

    order_rng.shuffle(order);
    double epoch_loss = 0.0;

    for (int begin = 0; begin < n; begin += cfg.slices_per_step) {
      const int group = std::min(cfg.slices_per_step, n - begin);
      tape.reset();
      const ImplicitVolume::TapedParams params = state.net.record_params(tape);
      slice_loss.clear();
      taped_poses.clear();
      for (int g = 0; g < group; ++g) {
        const int s = order[begin + g];
        const TapedPose tp = record_pose(tape, state.poses[s], poses_trainable);
        taped_poses.push_back(tp);
        const TapedWorld world = plane_to_world_taped(tape, grid, tp);
        const ad::NodeId feats =
            positional_encode_taped(tape, world, cfg.levels, cfg.use_encoding);
        const ad::NodeId pred = state.net.forward_taped(tape, params, feats);
        slice_loss.push_back(ssim_loss(tape, pred, images[s]));
      }
      const ad::NodeId total = tape.mean(tape.concat_cols(slice_loss));
      const double step_loss = tape.scalar_value(total);
      if (!std::isfinite(step_loss)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at epoch " << epoch << ", slices";
        for (int g = 0; g < group; ++g) msg << ' ' << order[begin + g];
        throw std::runtime_error(msg.str());
      }
      epoch_loss += step_loss * group;

      const ad::GradStore grads = tape.backward(total);
      for (int l = 0; l < layers; ++l) {
        adam_step(state.net.weight(l), grads.grad(params.w[l]), w_state[l], net_lr);
        adam_step(state.net.bias(l), grads.grad(params.b[l]), b_state[l], net_lr);
      }
      if (poses_trainable) {
        for (int g = 0; g < group; ++g) {
          const int s = order[begin + g];
          const TapedPose& tp = taped_poses[g];
          SlicePose& p = state.poses[s];
          double pv[6] = {p.euler[0], p.euler[1], p.euler[2],
                          p.trans[0], p.trans[1], p.trans[2]};
          const double gv[6] = {grads.grad(tp.rx)[0], grads.grad(tp.ry)[0],
                                grads.grad(tp.rz)[0], grads.grad(tp.tx)[0],
                                grads.grad(tp.ty)[0], grads.grad(tp.tz)[0]};
          adam_step(pv, gv, pose_state[s], pose_lr);
          p.euler = {pv[0], pv[1], pv[2]};
          p.trans = {pv[3], pv[4], pv[5]};
        }
      }
    }
    state.history.push_back({epoch_loss / n, net_lr, pose_lr});
  }
  return state;
}

// Renders the slice seen from `pose`: reference grid -> world -> network,
// clamped to displayable [0,1].
inline SliceImage render_slice(const ImplicitVolume& net, const SlicePose& pose, int h,
                               int w) {
  const PlaneGrid grid = reference_grid(h, w);
  const std::vector<double> pts = plane_to_world(grid, pose);
  SliceImage img(h, w);
  net.forward_points(pts, img.pix, /*clamp=*/true);
  return img;
}

inline SliceImage render_slice(const ReconstructionState& state, const SlicePose& pose,
                               int h, int w) {
  return render_slice(state.net, pose, h, w);
}

// Evaluates the network on a side^3 voxel lattice over [-1,1]^3.
inline VoxelVolume export_volume(const ImplicitVolume& net, int side) {
  if (side < 2) throw std::invalid_argument("export_volume: side must be >= 2");
  VoxelVolume vol(side);
  const std::int64_t total = static_cast<std::int64_t>(side) * side * side;
  parallel_for(total, [&](std::int64_t lo, std::int64_t hi) {
    constexpr std::int64_t kBatch = 4096;  // bounds the encoded-feature buffer
    std::vector<double> pts;
    std::vector<double> out;
    for (std::int64_t base = lo; base < hi; base += kBatch) {
      const std::int64_t count = std::min(kBatch, hi - base);
      pts.resize(3 * count);
      for (std::int64_t v = 0; v < count; ++v) {
        const std::int64_t idx = base + v;
        const int i = static_cast<int>(idx / (side * side));
        const int j = static_cast<int>((idx / side) % side);
        const int k = static_cast<int>(idx % side);
        const auto c = vol.voxel_center(i, j, k);
        pts[3 * v] = c[0];
        pts[3 * v + 1] = c[1];
        pts[3 * v + 2] = c[2];
      }
      net.forward_points(pts, out, /*clamp=*/true);
      std::copy(out.begin(), out.end(), vol.vox.begin() + base);
    }
  });
  return vol;
}

inline VoxelVolume export_volume(const ReconstructionState& state, int side) {
  return export_volume(state.net, side);
}

}  // namespace ivol
