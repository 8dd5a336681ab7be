#pragma once

// Novel-view evaluation: rigidly align a reconstructed volume to the ground
// truth, sample matched axial/coronal/sagittal stacks from both, and report
// per-plane NCC/SSIM statistics plus pose-recovery errors.

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/baseline.hpp"
#include "ivol/metrics.hpp"
#include "ivol/util.hpp"
#include "ivol/volume.hpp"

namespace ivol {

inline constexpr int kEvalPlaneSize = 64;
inline constexpr double kEvalExtent = 0.75;   // central crop, avoids empty corners
inline constexpr double kEvalOffsetSpan = 0.5;  // offsets in [-span, span]

// Canonical novel-view pose: a plane of the named family, displaced `offset`
// (normalized units) along its normal.
inline SlicePose novel_view_pose(const std::string& plane, double offset) {
  SlicePose p;
  if (plane == "axial") {
    p.trans = {0.0, 0.0, offset};  // z = offset, image axes x/y
  } else if (plane == "coronal") {
    p.euler = {std::numbers::pi / 2.0, 0.0, 0.0};  // y = offset
    p.trans = {0.0, offset, 0.0};
  } else if (plane == "sagittal") {
    p.euler = {0.0, std::numbers::pi / 2.0, 0.0};  // x = offset
    p.trans = {offset, 0.0, 0.0};
  } else {
    throw std::invalid_argument("novel_view_pose: unknown plane '" + plane +
                                "' (expected axial, coronal or sagittal)");
  }
  return p;
}

struct PlaneStats {
  std::string plane;
  double ncc_mean = 0.0, ncc_sd = 0.0;
  double ssim_mean = 0.0, ssim_sd = 0.0;
};

struct EvalReport {
  std::vector<PlaneStats> planes;
  PoseError pose_mean;  // per-slice pose error vs truth, averaged
  PoseError pose_sd;
  SlicePose align_transform;  // reconstruction -> truth pull-back
  double align_ncc = 0.0;
};

namespace detail {

struct MeanSd {
  double mean = 0.0, sd = 0.0;
};

inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace detail

// Aligns `recon` to `truth`, then compares slice stacks sampled identically
// from both. Pose spans may be empty (pose errors report as zero).
inline EvalReport evaluate_volume(const VoxelVolume& recon, const VoxelVolume& truth,
                                  std::span<const SlicePose> estimated_poses,
                                  std::span<const SlicePose> true_poses,
                                  std::span<const std::string> planes,
                                  int slices_per_plane = 20) {
  if (estimated_poses.size() != true_poses.size())
    throw std::invalid_argument("evaluate_volume: " +
                                std::to_string(estimated_poses.size()) +
                                " estimated vs " + std::to_string(true_poses.size()) +
                                " true poses");
  if (slices_per_plane < 1)
    throw std::invalid_argument("evaluate_volume: slices_per_plane must be >= 1");

  const RigidAlignResult aligned = rigid_align(recon, truth);

  EvalReport report;
  report.align_transform = aligned.transform;
  report.align_ncc = aligned.ncc_aligned;

  std::vector<double> nccs, ssims;
  for (const std::string& plane : planes) {
    nccs.clear();
    ssims.clear();
    for (int i = 0; i < slices_per_plane; ++i) {
      const double offset =
          slices_per_plane == 1
              ? 0.0
              : -kEvalOffsetSpan + 2.0 * kEvalOffsetSpan * i / (slices_per_plane - 1);
      const SlicePose pose = novel_view_pose(plane, offset);
      const SliceImage want =
          sample_plane(truth, pose, kEvalPlaneSize, kEvalPlaneSize, kEvalExtent);
      const SliceImage got =
          sample_plane(aligned.aligned, pose, kEvalPlaneSize, kEvalPlaneSize, kEvalExtent);
      nccs.push_back(ncc(want, got));
      ssims.push_back(ssim(want, got));
    }
    const auto nstat = detail::mean_sd(nccs);
    const auto sstat = detail::mean_sd(ssims);
    report.planes.push_back({plane, nstat.mean, nstat.sd, sstat.mean, sstat.sd});
  }

  if (!true_poses.empty()) {
    std::vector<double> angles, dists;
    for (std::size_t i = 0; i < true_poses.size(); ++i) {
      const PoseError e = pose_error(estimated_poses[i], true_poses[i], truth.side);
      angles.push_back(e.angle);
      dists.push_back(e.distance);
    }
    const auto astat = detail::mean_sd(angles);
    const auto dstat = detail::mean_sd(dists);
    report.pose_mean = {astat.mean, dstat.mean};
    report.pose_sd = {astat.sd, dstat.sd};
  }
  return report;
}

// ---------------------------------------------------------------------------
// Metric CSV: one mean row per plane plus a matching "<plane>_sd" row. Pose
// errors do not vary by plane, so every mean row repeats them.

struct MetricsRow {
  std::string approach;
  int n = 0;
  bool jointly_optimized = false;
  std::string plane;
  double ncc = 0.0;
  double ssim = 0.0;
  double angle_rad = 0.0;
  double distance_px = 0.0;
};

inline std::vector<MetricsRow> metrics_rows(const std::string& approach, int n,
                                            bool jointly_optimized,
                                            const EvalReport& report) {
  std::vector<MetricsRow> rows;
  for (const PlaneStats& p : report.planes) {
    rows.push_back({approach, n, jointly_optimized, p.plane, p.ncc_mean, p.ssim_mean,
                    report.pose_mean.angle, report.pose_mean.distance});
    rows.push_back({approach, n, jointly_optimized, p.plane + "_sd", p.ncc_sd, p.ssim_sd,
                    report.pose_sd.angle, report.pose_sd.distance});
  }
  return rows;
}

inline constexpr const char* kMetricsHeader =
    "approach,N,jointly_optimized,plane,ncc,ssim,angle_rad,distance_px";

inline void write_metrics_csv(const std::string& path,
                              std::span<const MetricsRow> rows) {
  std::string csv = std::string(kMetricsHeader) + "\n";
  for (const MetricsRow& r : rows) {
    csv += r.approach;
    csv += ',';
    csv += std::to_string(r.n);
    csv += ',';
    csv += r.jointly_optimized ? '1' : '0';
    csv += ',';
    csv += r.plane;
    csv += ',';
    csv += format_double(r.ncc);
    csv += ',';
    csv += format_double(r.ssim);
    csv += ',';
    csv += format_double(r.angle_rad);
    csv += ',';
    csv += format_double(r.distance_px);
    csv += '\n';
  }
  atomic_write_file(path, csv);
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<MetricsRow> rows;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != kMetricsHeader)
        throw std::runtime_error("metrics csv: bad header in " + path);
      continue;
    }
    std::vector<std::string> fields;
    std::size_t fpos = 0;
    while (true) {
      const std::size_t comma = line.find(',', fpos);
      fields.push_back(line.substr(fpos, comma - fpos));
      if (comma == std::string::npos) break;
      fpos = comma + 1;
    }
    if (fields.size() != 8)
      throw std::runtime_error("metrics csv: line " + std::to_string(line_no) + " has " +
                               std::to_string(fields.size()) + " fields, expected 8");
    MetricsRow r;
    r.approach = fields[0];
    try {
      r.n = std::stoi(fields[1]);
      r.jointly_optimized = std::stoi(fields[2]) != 0;
      r.ncc = std::stod(fields[4]);
      r.ssim = std::stod(fields[5]);
      r.angle_rad = std::stod(fields[6]);
      r.distance_px = std::stod(fields[7]);
    } catch (const std::exception&) {
      throw std::runtime_error("metrics csv: unparseable numeric field on line " +
                               std::to_string(line_no));
    }
    r.plane = fields[3];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ivol
