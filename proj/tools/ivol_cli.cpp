// Command-line driver: simulate acquisitions, reconstruct (implicit or
// baseline), evaluate against ground truth, and render slices. Every command
// records a manifest.json describing its resolved inputs so runs can be
// reproduced bit-for-bit.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ivol/baseline.hpp"
#include "ivol/datasim.hpp"
#include "ivol/evaluate.hpp"
#include "ivol/reconstruct.hpp"
#include "ivol/siren.hpp"
#include "ivol/volume.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_manifest(const fs::path& path, const json& manifest) {
  ivol::atomic_write_file(path.string(), manifest.dump(2) + "\n");
}

// "IVOLVOL1" -> volume file, "IVOL1" -> checkpoint.
bool is_checkpoint_file(const std::string& path) {
  const std::string head = ivol::read_file(path).substr(0, 8);
  if (head.rfind("IVOLVOL1", 0) == 0) return false;
  if (head.rfind(ivol::kCheckpointMagic, 0) == 0) return true;
  throw std::runtime_error("reconstruction " + path +
                           ": not a volume or checkpoint file");
}

std::vector<std::string> split_planes(const std::string& spec) {
  std::vector<std::string> planes;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    const std::string name =
        spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!name.empty()) planes.push_back(name);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (planes.empty())
    throw std::runtime_error("--planes: no plane names in '" + spec + "'");
  for (const std::string& p : planes) ivol::novel_view_pose(p, 0.0);  // validates
  return planes;
}

ivol::SlicePose parse_pose(const std::string& spec) {
  std::vector<double> vals;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    const std::string cell =
        spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw std::runtime_error("--pose: '" + cell + "' is not a number");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (vals.size() != 6)
    throw std::runtime_error("--pose: expected 6 comma-separated values, got " +
                             std::to_string(vals.size()));
  ivol::SlicePose p;
  p.euler = {vals[0], vals[1], vals[2]};
  p.trans = {vals[3], vals[4], vals[5]};
  return p;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string volume;
  std::uint64_t phantom_seed = 0;
  int phantom_side = 64;
  int n = 0;
  int slice_size = 0;  // 0 = volume side
  double tilt_jitter = 0.05;
  double sigma_angle = 0.0;
  double sigma_trans = 0.0;
  bool noise_walk = false;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  ivol::VoxelVolume truth;
  std::string descriptor;
  if (!a.volume.empty()) {
    ivol::LoadedVolume lv = ivol::read_volume(a.volume);
    truth = std::move(lv.volume);
    descriptor = lv.descriptor;
  } else {
    ivol::Phantom ph = ivol::generate_phantom(a.phantom_side, a.phantom_seed);
    truth = std::move(ph.volume);
    descriptor = ph.descriptor;
  }

  ivol::AcquisitionSet acq =
      ivol::sample_slices(truth, a.n, a.tilt_jitter, a.seed, a.slice_size, a.slice_size);
  const ivol::NoiseMode mode =
      a.noise_walk ? ivol::NoiseMode::kRandomWalk : ivol::NoiseMode::kIndependent;
  acq.sigma_angle = a.sigma_angle;
  acq.sigma_translation = a.sigma_trans;
  acq.noise_seed = a.seed + 1;
  acq.noisy_poses = ivol::perturb_poses(acq.true_poses, a.sigma_angle, a.sigma_trans,
                                        truth.side, acq.noise_seed, mode);

  fs::create_directories(a.out);
  ivol::save_acquisition(a.out, acq);
  ivol::write_volume((fs::path(a.out) / "truth.ivol").string(), truth, descriptor);

  json manifest;
  manifest["command"] = "simulate";
  if (!a.volume.empty())
    manifest["volume"] = a.volume;
  else {
    manifest["phantom_seed"] = a.phantom_seed;
    manifest["phantom_side"] = a.phantom_side;
  }
  manifest["n"] = a.n;
  manifest["slice_size"] = a.slice_size == 0 ? truth.side : a.slice_size;
  manifest["tilt_jitter"] = a.tilt_jitter;
  manifest["sigma_angle"] = a.sigma_angle;
  manifest["sigma_trans"] = a.sigma_trans;
  manifest["noise_mode"] = a.noise_walk ? "walk" : "independent";
  manifest["seed"] = a.seed;
  manifest["noise_seed"] = acq.noise_seed;
  manifest["outputs"] = {"poses.csv", "truth.ivol"};
  write_manifest(fs::path(a.out) / "manifest.json", manifest);

  std::cout << "simulate: " << acq.size() << " slices of "
            << acq.images[0].h << "x" << acq.images[0].w << " from side-" << truth.side
            << " volume -> " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ReconstructArgs {
  std::string acq;
  std::string method;
  bool joint = false;
  bool true_poses = false;
  int epochs = 10000;
  int side = 64;
  int levels = 10;
  bool no_encoding = false;
  double net_lr = 1e-3;
  double pose_lr = 1e-3;
  int slices_per_step = 4;
  int warmup = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_reconstruct(const ReconstructArgs& a) {
  const ivol::AcquisitionSet acq = ivol::load_acquisition(a.acq);
  const std::vector<ivol::SlicePose>& poses =
      a.true_poses ? acq.true_poses : acq.noisy_poses;
  fs::create_directories(a.out);

  json manifest;
  manifest["command"] = "reconstruct";
  manifest["acq"] = a.acq;
  manifest["method"] = a.method;
  manifest["initial_poses"] = a.true_poses ? "true" : "noisy";

  const auto t0 = std::chrono::steady_clock::now();
  if (a.method == "implicit") {
    ivol::TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.network_lr = a.net_lr;
    cfg.pose_lr = a.pose_lr;
    cfg.slices_per_step = a.slices_per_step;
    cfg.joint_optimize = a.joint;
    cfg.pose_warmup = a.warmup;
    cfg.levels = a.levels;
    cfg.use_encoding = !a.no_encoding;
    cfg.seed = a.seed;

    const ivol::ReconstructionState state = ivol::train(acq.images, poses, cfg);
    ivol::save_checkpoint((fs::path(a.out) / "checkpoint.ivol").string(), state.net,
                          state.poses);
    ivol::write_loss_csv((fs::path(a.out) / "loss.csv").string(), state.history);

    manifest["epochs"] = cfg.epochs;
    manifest["network_lr"] = cfg.network_lr;
    manifest["pose_lr"] = cfg.pose_lr;
    manifest["slices_per_step"] = cfg.slices_per_step;
    manifest["joint_optimize"] = cfg.joint_optimize;
    manifest["pose_warmup"] = cfg.pose_warmup;
    manifest["levels"] = cfg.levels;
    manifest["use_encoding"] = cfg.use_encoding;
    manifest["seed"] = cfg.seed;
    manifest["outputs"] = {"checkpoint.ivol", "loss.csv"};
    write_manifest(fs::path(a.out) / "manifest.json", manifest);

    const double final_loss =
        state.history.empty() ? 0.0 : state.history.back().mean_loss;
    std::cout << "implicit: " << acq.size() << " slices, " << cfg.epochs
              << " epochs, final loss " << ivol::format_double(final_loss) << ", "
              << seconds_since(t0) << " s\n";
  } else {  // baseline
    const ivol::PointCloud cloud = ivol::scatter(acq.images, poses);
    const ivol::VoxelVolume vol = ivol::idw_reconstruct(cloud, a.side);
    ivol::write_volume((fs::path(a.out) / "volume.ivol").string(), vol,
                       "idw k=20 from " + std::to_string(cloud.size()) + " points");

    manifest["side"] = a.side;
    manifest["seed"] = a.seed;
    manifest["outputs"] = {"volume.ivol"};
    write_manifest(fs::path(a.out) / "manifest.json", manifest);

    std::cout << "baseline: " << cloud.size() << " points -> " << a.side << "^3, "
              << seconds_since(t0) << " s\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string recon;
  std::string truth;
  std::string acq;
  std::string planes = "axial,coronal,sagittal";
  int slices_per_plane = 20;
  std::string approach;  // empty = derive from file type
  bool joint = false;
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const std::vector<std::string> planes = split_planes(a.planes);
  const ivol::VoxelVolume truth = ivol::read_volume(a.truth).volume;

  std::vector<ivol::SlicePose> estimated, truth_poses;
  if (!a.acq.empty()) {
    ivol::AcquisitionSet acq;
    ivol::read_poses_csv((fs::path(a.acq) / "poses.csv").string(), acq);
    estimated = acq.noisy_poses;  // replaced by checkpoint poses below
    truth_poses = acq.true_poses;
  }

  std::string approach = a.approach;
  ivol::VoxelVolume recon;
  if (is_checkpoint_file(a.recon)) {
    const ivol::Checkpoint ckpt = ivol::load_checkpoint(a.recon);
    recon = ivol::export_volume(ckpt.net, truth.side);
    if (!truth_poses.empty()) {
      if (ckpt.poses.size() != truth_poses.size())
        throw std::runtime_error("evaluate: checkpoint has " +
                                 std::to_string(ckpt.poses.size()) +
                                 " poses but acquisition has " +
                                 std::to_string(truth_poses.size()));
      estimated = ckpt.poses;
    }
    if (approach.empty()) approach = "implicit";
  } else {
    recon = ivol::read_volume(a.recon).volume;
    if (approach.empty()) approach = "baseline";
  }

  const ivol::EvalReport report = ivol::evaluate_volume(
      recon, truth, estimated, truth_poses, planes, a.slices_per_plane);
  const std::vector<ivol::MetricsRow> rows = ivol::metrics_rows(
      approach, static_cast<int>(truth_poses.size()), a.joint, report);
  ivol::write_metrics_csv(a.out, rows);

  json manifest;
  manifest["command"] = "evaluate";
  manifest["recon"] = a.recon;
  manifest["truth"] = a.truth;
  if (!a.acq.empty()) manifest["acq"] = a.acq;
  manifest["planes"] = planes;
  manifest["slices_per_plane"] = a.slices_per_plane;
  manifest["approach"] = approach;
  manifest["jointly_optimized"] = a.joint;
  write_manifest(a.out + ".manifest.json", manifest);

  std::cout << ivol::kMetricsHeader << "\n";
  for (const ivol::MetricsRow& r : rows)
    std::cout << r.approach << "," << r.n << "," << (r.jointly_optimized ? 1 : 0) << ","
              << r.plane << "," << ivol::format_double(r.ncc) << ","
              << ivol::format_double(r.ssim) << "," << ivol::format_double(r.angle_rad)
              << "," << ivol::format_double(r.distance_px) << "\n";
  std::cout << "alignment ncc " << ivol::format_double(report.align_ncc) << " -> "
            << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string recon;
  std::string pose = "0,0,0,0,0,0";
  std::vector<int> size{128, 128};
  std::string out;
};

int cmd_render(const RenderArgs& a) {
  const ivol::SlicePose pose = parse_pose(a.pose);
  const int h = a.size[0], w = a.size[1];
  if (h < 1 || w < 1) throw std::runtime_error("--size: dimensions must be positive");

  ivol::SliceImage img;
  if (is_checkpoint_file(a.recon)) {
    const ivol::Checkpoint ckpt = ivol::load_checkpoint(a.recon);
    img = ivol::render_slice(ckpt.net, pose, h, w);
  } else {
    const ivol::VoxelVolume vol = ivol::read_volume(a.recon).volume;
    img = ivol::sample_plane(vol, pose, h, w);
  }
  ivol::write_pgm(a.out, img);

  json manifest;
  manifest["command"] = "render";
  manifest["recon"] = a.recon;
  manifest["pose"] = a.pose;
  manifest["size"] = {h, w};
  write_manifest(a.out + ".manifest.json", manifest);

  std::cout << "render: " << h << "x" << w << " -> " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit 3D volume reconstruction from posed 2D slices"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* c_sim = app.add_subcommand(
      "simulate", "sample a slice acquisition from a phantom or volume file");
  CLI::Option* o_vol = c_sim->add_option("--volume", sim.volume,
                                         "ground-truth volume file (.ivol)");
  c_sim->add_option("--phantom-seed", sim.phantom_seed,
                    "generate the phantom with this seed")
      ->excludes(o_vol);
  c_sim->add_option("--phantom-side", sim.phantom_side, "phantom resolution")
      ->check(CLI::Range(16, 4096));
  c_sim->add_option("--n", sim.n, "number of slices")
      ->required()
      ->check(CLI::PositiveNumber);
  c_sim->add_option("--slice-size", sim.slice_size,
                    "slice height=width in pixels (0 = volume side)")
      ->check(CLI::NonNegativeNumber);
  c_sim->add_option("--tilt-jitter", sim.tilt_jitter,
                    "uniform jitter for sweep and tilt angles, radians")
      ->check(CLI::NonNegativeNumber);
  c_sim->add_option("--sigma-angle", sim.sigma_angle,
                    "target mean angle error of noisy poses, radians")
      ->check(CLI::NonNegativeNumber);
  c_sim->add_option("--sigma-trans", sim.sigma_trans,
                    "target mean distance error of noisy poses, pixels")
      ->check(CLI::NonNegativeNumber);
  c_sim->add_flag("--noise-walk", sim.noise_walk,
                  "correlate pose noise along the sweep");
  c_sim->add_option("--seed", sim.seed, "acquisition seed (noise uses seed+1)");
  c_sim->add_option("--out", sim.out, "output directory")->required();

  ReconstructArgs rec;
  CLI::App* c_rec =
      app.add_subcommand("reconstruct", "fit a reconstruction to an acquisition");
  c_rec->add_option("--acq", rec.acq, "acquisition directory")->required();
  c_rec->add_option("--method", rec.method, "implicit or baseline")
      ->required()
      ->check(CLI::IsMember({"implicit", "baseline"}));
  c_rec->add_flag("--joint,!--no-joint", rec.joint,
                  "jointly optimize slice poses (implicit only)");
  c_rec->add_flag("--true-poses", rec.true_poses,
                  "start from true instead of noisy poses");
  c_rec->add_option("--epochs", rec.epochs, "training epochs")
      ->check(CLI::NonNegativeNumber);
  c_rec->add_option("--side", rec.side, "baseline output volume side")
      ->check(CLI::Range(2, 4096));
  c_rec->add_option("--l", rec.levels, "positional encoding levels")
      ->check(CLI::PositiveNumber);
  c_rec->add_flag("--no-encoding", rec.no_encoding, "feed raw coordinates");
  c_rec->add_option("--net-lr", rec.net_lr, "network learning rate");
  c_rec->add_option("--pose-lr", rec.pose_lr, "pose learning rate");
  c_rec->add_option("--slices-per-step", rec.slices_per_step, "slices per Adam step")
      ->check(CLI::PositiveNumber);
  c_rec->add_option("--warmup", rec.warmup, "epochs before pose updates")
      ->check(CLI::NonNegativeNumber);
  c_rec->add_option("--seed", rec.seed, "training seed");
  c_rec->add_option("--out", rec.out, "output directory")->required();

  EvaluateArgs ev;
  CLI::App* c_ev = app.add_subcommand(
      "evaluate", "score a reconstruction against the ground truth");
  c_ev->add_option("--recon", ev.recon, "checkpoint or volume file")->required();
  c_ev->add_option("--truth", ev.truth, "ground-truth volume file")->required();
  c_ev->add_option("--acq", ev.acq, "acquisition directory (for pose errors)");
  c_ev->add_option("--planes", ev.planes, "comma list of axial,coronal,sagittal");
  c_ev->add_option("--slices-per-plane", ev.slices_per_plane, "samples per plane")
      ->check(CLI::PositiveNumber);
  c_ev->add_option("--approach", ev.approach, "label for the approach column");
  c_ev->add_flag("--joint,!--no-joint", ev.joint,
                 "label rows as jointly optimized");
  c_ev->add_option("--out", ev.out, "metrics CSV path")->required();

  RenderArgs ren;
  CLI::App* c_ren =
      app.add_subcommand("render", "render one slice from a reconstruction");
  c_ren->add_option("--recon", ren.recon, "checkpoint or volume file")->required();
  c_ren->add_option("--pose", ren.pose, "rx,ry,rz,tx,ty,tz (radians, normalized)");
  c_ren->add_option("--size", ren.size, "height width")->expected(2);
  c_ren->add_option("--out", ren.out, "output PGM path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_rec->parsed()) return cmd_reconstruct(rec);
    if (c_ev->parsed()) return cmd_evaluate(ev);
    if (c_ren->parsed()) return cmd_render(ren);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
