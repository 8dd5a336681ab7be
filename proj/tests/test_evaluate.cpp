#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ivol/datasim.hpp"
#include "ivol/evaluate.hpp"

using Catch::Matchers::WithinAbs;
using ivol::EvalReport;
using ivol::MetricsRow;
using ivol::PlaneStats;
using ivol::SlicePose;
using ivol::VoxelVolume;
using ivol::evaluate_volume;
using ivol::generate_phantom;
using ivol::metrics_rows;
using ivol::novel_view_pose;
using ivol::read_metrics_csv;
using ivol::write_metrics_csv;

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kAllPlanes{"axial", "coronal", "sagittal"};

fs::path scratch_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ivol_evaluate";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("novel view poses lie on the named plane", "[evaluate]") {
  const ivol::PlaneGrid grid = ivol::reference_grid(5, 7);
  for (double offset : {-0.4, 0.0, 0.3}) {
    const std::vector<double> axial =
        ivol::plane_to_world(grid, novel_view_pose("axial", offset));
    const std::vector<double> coronal =
        ivol::plane_to_world(grid, novel_view_pose("coronal", offset));
    const std::vector<double> sagittal =
        ivol::plane_to_world(grid, novel_view_pose("sagittal", offset));
    for (int p = 0; p < grid.pixels(); ++p) {
      CHECK_THAT(axial[3 * p + 2], WithinAbs(offset, 1e-15));     // z fixed
      CHECK_THAT(coronal[3 * p + 1], WithinAbs(offset, 1e-15));   // y fixed
      CHECK_THAT(sagittal[3 * p + 0], WithinAbs(offset, 1e-15));  // x fixed
    }
  }
  CHECK_THROWS_AS(novel_view_pose("oblique", 0.0), std::invalid_argument);
}

TEST_CASE("evaluating the truth against itself scores perfectly", "[evaluate]") {
  const VoxelVolume truth = generate_phantom(32, 17).volume;
  const EvalReport report = evaluate_volume(truth, truth, {}, {}, kAllPlanes, 5);

  REQUIRE(report.planes.size() == 3);
  for (const PlaneStats& p : report.planes) {
    CHECK_THAT(p.ncc_mean, WithinAbs(1.0, 1e-6));
    CHECK_THAT(p.ssim_mean, WithinAbs(1.0, 1e-6));
    CHECK_THAT(p.ncc_sd, WithinAbs(0.0, 1e-6));
    CHECK_THAT(p.ssim_sd, WithinAbs(0.0, 1e-6));
  }
  CHECK(report.pose_mean.angle == 0.0);
  CHECK(report.pose_mean.distance == 0.0);
  CHECK(report.align_ncc >= 1.0 - 1e-9);
}

TEST_CASE("evaluation reports pose recovery errors", "[evaluate]") {
  const VoxelVolume truth = generate_phantom(24, 19).volume;

  SlicePose a, b;
  b.euler = {0.1, 0.0, 0.0};
  b.trans = {0.0, 0.0, 0.2};
  const std::vector<SlicePose> est{a, b};
  const std::vector<SlicePose> tru{a, a};
  const std::vector<std::string> planes{"axial"};
  const EvalReport report = evaluate_volume(truth, truth, est, tru, planes, 3);

  // Slice errors: (0, 0) and (0.1/3 rad, 0.2 * side/2 px); report averages them.
  CHECK_THAT(report.pose_mean.angle, WithinAbs(0.1 / 3.0 / 2.0, 1e-12));
  CHECK_THAT(report.pose_mean.distance, WithinAbs(0.2 * 12.0 / 2.0, 1e-12));
  CHECK(report.pose_sd.angle > 0.0);
  CHECK(report.pose_sd.distance > 0.0);

  const std::vector<SlicePose> mismatched{a};
  CHECK_THROWS_AS(evaluate_volume(truth, truth, mismatched, tru, planes, 3),
                  std::invalid_argument);
  CHECK_THROWS_AS(evaluate_volume(truth, truth, est, tru, planes, 0),
                  std::invalid_argument);
}

TEST_CASE("metric rows carry means and standard deviations per plane", "[evaluate]") {
  EvalReport report;
  report.planes.push_back({"axial", 0.9, 0.01, 0.8, 0.02});
  report.planes.push_back({"coronal", 0.85, 0.015, 0.75, 0.025});
  report.pose_mean = {0.2, 5.0};
  report.pose_sd = {0.05, 1.5};

  const std::vector<MetricsRow> rows = metrics_rows("implicit", 128, true, report);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].plane == "axial");
  CHECK(rows[0].ncc == 0.9);
  CHECK(rows[0].ssim == 0.8);
  CHECK(rows[0].angle_rad == 0.2);
  CHECK(rows[0].distance_px == 5.0);
  CHECK(rows[1].plane == "axial_sd");
  CHECK(rows[1].ncc == 0.01);
  CHECK(rows[1].angle_rad == 0.05);
  CHECK(rows[2].plane == "coronal");
  CHECK(rows[3].plane == "coronal_sd");
  for (const MetricsRow& r : rows) {
    CHECK(r.approach == "implicit");
    CHECK(r.n == 128);
    CHECK(r.jointly_optimized);
  }
}

TEST_CASE("metrics csv round-trips exactly", "[evaluate]") {
  std::vector<MetricsRow> rows;
  rows.push_back({"implicit", 128, true, "axial", 0.912345678901234, 0.8, 0.1, 4.25});
  rows.push_back({"baseline", 256, false, "coronal_sd", -0.25, 0.0, 0.0, 1e-9});

  const std::string path = scratch_file("metrics.csv").string();
  write_metrics_csv(path, rows);
  const std::vector<MetricsRow> back = read_metrics_csv(path);

  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].approach == rows[i].approach);
    CHECK(back[i].n == rows[i].n);
    CHECK(back[i].jointly_optimized == rows[i].jointly_optimized);
    CHECK(back[i].plane == rows[i].plane);
    CHECK(back[i].ncc == rows[i].ncc);
    CHECK(back[i].ssim == rows[i].ssim);
    CHECK(back[i].angle_rad == rows[i].angle_rad);
    CHECK(back[i].distance_px == rows[i].distance_px);
  }
}

TEST_CASE("metrics csv reader rejects malformed files", "[evaluate]") {
  const std::string path = scratch_file("bad.csv").string();

  ivol::atomic_write_file(path, "wrong,header\n");
  CHECK_THROWS_WITH(read_metrics_csv(path), Catch::Matchers::ContainsSubstring("header"));

  ivol::atomic_write_file(path, std::string(ivol::kMetricsHeader) + "\na,1,0,axial,0.5\n");
  CHECK_THROWS_WITH(read_metrics_csv(path), Catch::Matchers::ContainsSubstring("fields"));

  ivol::atomic_write_file(path, std::string(ivol::kMetricsHeader) +
                                    "\na,1,0,axial,zzz,0.5,0.1,2\n");
  CHECK_THROWS_WITH(read_metrics_csv(path),
                    Catch::Matchers::ContainsSubstring("unparseable"));
}

TEST_CASE("mean and standard deviation helper", "[evaluate]") {
  const std::vector<double> xs{1.0, 2.0, 3.0};
  const auto r = ivol::detail::mean_sd(xs);
  CHECK_THAT(r.mean, WithinAbs(2.0, 1e-15));
  CHECK_THAT(r.sd, WithinAbs(1.0, 1e-15));

  const std::vector<double> one{4.0};
  const auto r1 = ivol::detail::mean_sd(one);
  CHECK(r1.mean == 4.0);
  CHECK(r1.sd == 0.0);

  const auto r0 = ivol::detail::mean_sd(std::vector<double>{});
  CHECK(r0.mean == 0.0);
  CHECK(r0.sd == 0.0);
}
