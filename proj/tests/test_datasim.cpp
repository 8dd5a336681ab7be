#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <vector>

#include "ivol/datasim.hpp"
#include "ivol/volume.hpp"
#include "oracles.hpp"

using ivol::AcquisitionSet;
using ivol::NoiseMode;
using ivol::Phantom;
using ivol::Rng;
using ivol::SliceImage;
using ivol::SlicePose;
using ivol::VoxelVolume;
using ivol::generate_phantom;
using ivol::perturb_poses;
using ivol::sample_plane;
using ivol::sample_slices;

namespace fs = std::filesystem;

namespace {

VoxelVolume random_volume(Rng& rng, int side) {
  VoxelVolume vol(side);
  for (double& v : vol.vox) v = rng.uniform01();
  return vol;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "ivol_datasim" / name;
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("trilinear sampling matches the scalar oracle", "[volume][oracle]") {
  Rng rng(11);
  VoxelVolume vol = random_volume(rng, 17);
  for (int trial = 0; trial < 200; ++trial) {
    // Cover inside, boundary and outside points.
    const double x = rng.uniform(-1.3, 1.3);
    const double y = rng.uniform(-1.3, 1.3);
    const double z = rng.uniform(-1.3, 1.3);
    CAPTURE(x, y, z);
    CHECK_THAT(vol.sample_world(x, y, z),
               Catch::Matchers::WithinAbs(
                   oracles::naive_trilinear(vol.vox, vol.side, x, y, z), 1e-12));
  }
  for (int i : {0, 7, 16})
    for (int j : {0, 3, 16}) {
      const auto c = vol.voxel_center(i, j, 5);
      CHECK_THAT(vol.sample_world(c[0], c[1], c[2]),
                 Catch::Matchers::WithinAbs(vol.at(i, j, 5), 1e-12));
    }
  CHECK(vol.sample_world(1.0000001, 0, 0) == 0.0);
  CHECK(vol.sample_world(0, -2.0, 0) == 0.0);
}

TEST_CASE("identity-pose plane extraction equals direct indexing", "[volume][oracle]") {
  Rng rng(3);
  VoxelVolume vol = random_volume(rng, 33);  // odd side: z = 0 is lattice plane k = 16
  SliceImage img = sample_plane(vol, SlicePose{}, 33, 33);
  for (int r = 0; r < 33; ++r)
    for (int c = 0; c < 33; ++c)
      CHECK_THAT(img.at(r, c), Catch::Matchers::WithinAbs(vol.at(c, r, 16), 1e-12));
}

TEST_CASE("phantom generation is deterministic with full dynamic range",
          "[datasim]") {
  Phantom a = generate_phantom(32, 5);
  Phantom b = generate_phantom(32, 5);
  CHECK(std::memcmp(a.volume.vox.data(), b.volume.vox.data(),
                    a.volume.vox.size() * sizeof(double)) == 0);
  CHECK(a.descriptor == b.descriptor);

  const auto [lo, hi] = std::minmax_element(a.volume.vox.begin(), a.volume.vox.end());
  CHECK(*lo == 0.0);
  CHECK(*hi == 1.0);

  Phantom c = generate_phantom(32, 6);
  CHECK(ivol::ncc(std::span<const double>(a.volume.vox),
                  std::span<const double>(c.volume.vox)) < 0.99);
  CHECK_THROWS_AS(generate_phantom(8, 1), std::invalid_argument);
}

TEST_CASE("sample_slices covers a jittered fan about the y axis", "[datasim]") {
  Phantom ph = generate_phantom(33, 9);

  SECTION("single slice at zero jitter is the identity central plane") {
    AcquisitionSet set = sample_slices(ph.volume, 1, 0.0, 42);
    REQUIRE(set.size() == 1);
    CHECK(set.true_poses[0] == SlicePose{});
    for (int r = 0; r < 33; ++r)
      for (int c = 0; c < 33; ++c)
        CHECK_THAT(set.images[0].at(r, c),
                   Catch::Matchers::WithinAbs(ph.volume.at(c, r, 16), 1e-12));
  }

  SECTION("counts, spacing and reproducibility") {
    AcquisitionSet set = sample_slices(ph.volume, 128, 0.0, 7);
    REQUIRE(set.size() == 128);
    REQUIRE(set.true_poses.size() == 128);
    REQUIRE(set.noisy_poses.size() == 128);
    for (int i = 0; i < 128; ++i) {
      CHECK_THAT(set.true_poses[i].euler[1],
                 Catch::Matchers::WithinAbs(i * std::numbers::pi / 128.0, 1e-12));
      CHECK(set.true_poses[i].euler[0] == 0.0);
      CHECK(set.true_poses[i].euler[2] == 0.0);
      CHECK(set.noisy_poses[i] == set.true_poses[i]);
    }
    AcquisitionSet again = sample_slices(ph.volume, 128, 0.0, 7);
    for (int i = 0; i < 128; ++i) CHECK(again.true_poses[i] == set.true_poses[i]);
  }

  SECTION("jittered poses stay within the tilt bound and vary") {
    AcquisitionSet set = sample_slices(ph.volume, 16, 0.05, 3);
    bool any_tilt = false;
    for (int i = 0; i < 16; ++i) {
      const auto& e = set.true_poses[i].euler;
      CHECK(std::abs(e[0]) <= 0.05);
      CHECK(std::abs(e[2]) <= 0.05);
      CHECK(std::abs(e[1] - i * std::numbers::pi / 16.0) <= 0.05);
      if (e[0] != 0.0 || e[2] != 0.0) any_tilt = true;
    }
    CHECK(any_tilt);
  }

  SECTION("slice pixels equal the trilinear oracle at the posed grid") {
    AcquisitionSet set = sample_slices(ph.volume, 4, 0.05, 21);
    Rng rng(77);
    ivol::PlaneGrid grid = ivol::reference_grid(33, 33);
    for (std::size_t s = 0; s < set.size(); ++s) {
      auto pts = ivol::plane_to_world(grid, set.true_poses[s]);
      for (int probe = 0; probe < 50; ++probe) {
        const int p = static_cast<int>(rng.below(grid.pixels()));
        CHECK_THAT(set.images[s].pix[p],
                   Catch::Matchers::WithinAbs(
                       oracles::naive_trilinear(ph.volume.vox, 33, pts[3 * p],
                                                pts[3 * p + 1], pts[3 * p + 2]),
                       1e-12));
      }
    }
  }

  SECTION("slice resolution can differ from the volume side") {
    AcquisitionSet set = sample_slices(ph.volume, 3, 0.0, 1, 24, 20);
    CHECK(set.images[0].h == 24);
    CHECK(set.images[0].w == 20);
  }
}

TEST_CASE("perturb_poses calibration and determinism", "[datasim]") {
  std::vector<SlicePose> poses(1000);
  Rng rng(15);
  for (auto& p : poses) {
    p.euler = {rng.uniform(-1.0, 1.0), rng.uniform(0.0, 3.0), rng.uniform(-1.0, 1.0)};
    p.trans = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
  }

  SECTION("zero sigma is a bit-identical copy") {
    auto out = perturb_poses(poses, 0.0, 0.0, 160, 99);
    for (std::size_t i = 0; i < poses.size(); ++i) CHECK(out[i] == poses[i]);
  }

  SECTION("same seed reproduces, different seed varies") {
    auto a = perturb_poses(poses, 0.24, 8.0, 160, 5);
    auto b = perturb_poses(poses, 0.24, 8.0, 160, 5);
    auto c = perturb_poses(poses, 0.24, 8.0, 160, 6);
    int diff = 0;
    for (std::size_t i = 0; i < poses.size(); ++i) {
      CHECK(a[i] == b[i]);
      if (!(a[i] == c[i])) ++diff;
    }
    CHECK(diff == static_cast<int>(poses.size()));
  }

  SECTION("Monte-Carlo means land on the row-(a) targets") {
    auto noisy = perturb_poses(poses, 0.24, 8.0, 160, 2024);
    double mean_angle = 0.0, mean_dist = 0.0;
    for (std::size_t i = 0; i < poses.size(); ++i) {
      auto e = ivol::pose_error(noisy[i], poses[i], 160);
      mean_angle += e.angle;
      mean_dist += e.distance;
    }
    mean_angle /= poses.size();
    mean_dist /= poses.size();
    CAPTURE(mean_angle, mean_dist);
    CHECK(mean_angle > 0.237 * 0.8);
    CHECK(mean_angle < 0.237 * 1.2);
    CHECK(mean_dist > 8.34 * 0.8);
    CHECK(mean_dist < 8.34 * 1.2);
  }

  SECTION("noise is unbiased") {
    std::vector<SlicePose> idpose(10000);
    auto noisy = perturb_poses(idpose, 0.24, 0.0, 160, 31);
    double mean = 0.0;
    for (const auto& p : noisy) mean += p.euler[0] + p.euler[1] + p.euler[2];
    mean /= 3.0 * idpose.size();
    const double per_axis_std = 0.24 * std::sqrt(std::numbers::pi / 2.0);
    const double se = per_axis_std / std::sqrt(3.0 * idpose.size());
    CHECK(std::abs(mean) < 3.0 * se);
  }

  SECTION("random-walk mode correlates neighbors but keeps the scale") {
    std::vector<SlicePose> idpose(4000);
    auto walk = perturb_poses(idpose, 0.24, 0.0, 160, 8, NoiseMode::kRandomWalk);
    auto walk2 = perturb_poses(idpose, 0.24, 0.0, 160, 8, NoiseMode::kRandomWalk);
    double lag = 0.0, var = 0.0;
    for (std::size_t i = 0; i < idpose.size(); ++i) {
      CHECK(walk[i] == walk2[i]);
      var += walk[i].euler[0] * walk[i].euler[0];
      if (i > 0) lag += walk[i].euler[0] * walk[i - 1].euler[0];
    }
    lag /= var;
    const double marginal = std::sqrt(var / idpose.size());
    CHECK(lag > 0.8);  // rho = 0.9 by construction
    const double want_std = 0.24 * std::sqrt(std::numbers::pi / 2.0);
    CHECK(marginal > want_std * 0.8);
    CHECK(marginal < want_std * 1.2);
  }
}

TEST_CASE("volume files round-trip at float32 precision", "[volume][io]") {
  Rng rng(8);
  VoxelVolume vol = random_volume(rng, 12);
  const fs::path dir = scratch_dir("vol");
  const std::string path = (dir / "test.ivol").string();
  ivol::write_volume(path, vol, "unit test volume");

  auto loaded = ivol::read_volume(path);
  CHECK(loaded.volume.side == 12);
  CHECK(loaded.descriptor == "unit test volume");
  for (std::size_t i = 0; i < vol.vox.size(); ++i)
    CHECK(loaded.volume.vox[i] == static_cast<double>(static_cast<float>(vol.vox[i])));

  const std::string data = ivol::read_file(path);
  CHECK(data.rfind("IVOLVOL1\nside 12\nrange 0 1\n", 0) == 0);
  const std::size_t header = data.find("data\n") + 5;
  CHECK(data.size() - header == 12u * 12u * 12u * 4u);

  SECTION("malformed inputs give structured errors") {
    ivol::atomic_write_file((dir / "trunc.ivol").string(),
                            data.substr(0, data.size() - 100));
    CHECK_THROWS_WITH(ivol::read_volume((dir / "trunc.ivol").string()),
                      Catch::Matchers::ContainsSubstring("truncated payload"));
    ivol::atomic_write_file((dir / "magic.ivol").string(), "IVOLVOLX" + data.substr(8));
    CHECK_THROWS_WITH(ivol::read_volume((dir / "magic.ivol").string()),
                      Catch::Matchers::ContainsSubstring("malformed header"));
    ivol::atomic_write_file((dir / "trail.ivol").string(), data + "x");
    CHECK_THROWS_WITH(ivol::read_volume((dir / "trail.ivol").string()),
                      Catch::Matchers::ContainsSubstring("trailing"));
    ivol::atomic_write_file((dir / "side.ivol").string(),
                            "IVOLVOL1\nside banana\nrange 0 1\ndescriptor\ndata\n");
    CHECK_THROWS_WITH(ivol::read_volume((dir / "side.ivol").string()),
                      Catch::Matchers::ContainsSubstring("side"));
  }
}

TEST_CASE("pgm files quantize to 8 bits", "[volume][io]") {
  const fs::path dir = scratch_dir("pgm");

  SliceImage ones(4, 5, 1.0);
  ivol::write_pgm((dir / "ones.pgm").string(), ones);
  std::string data = ivol::read_file((dir / "ones.pgm").string());
  CHECK(data.rfind("P5\n5 4\n255\n", 0) == 0);
  for (std::size_t i = data.size() - 20; i < data.size(); ++i)
    CHECK(static_cast<unsigned char>(data[i]) == 255);

  SliceImage zeros(4, 5, 0.0);
  ivol::write_pgm((dir / "zeros.pgm").string(), zeros);
  data = ivol::read_file((dir / "zeros.pgm").string());
  CHECK(static_cast<unsigned char>(data.back()) == 0);

  SliceImage half(4, 5, 0.5);
  ivol::write_pgm((dir / "half.pgm").string(), half);
  data = ivol::read_file((dir / "half.pgm").string());
  CHECK(static_cast<unsigned char>(data.back()) == 128);  // round-half-up

  SliceImage loaded = ivol::read_pgm((dir / "half.pgm").string());
  CHECK(loaded.h == 4);
  CHECK(loaded.w == 5);
  for (double v : loaded.pix) CHECK(v == 128.0 / 255.0);

  ivol::atomic_write_file((dir / "bad.pgm").string(), "P5\n5 4\n255\nxx");
  CHECK_THROWS_WITH(ivol::read_pgm((dir / "bad.pgm").string()),
                    Catch::Matchers::ContainsSubstring("truncated"));
  ivol::atomic_write_file((dir / "p2.pgm").string(), "P2\n2 2\n255\n0 0 0 0\n");
  CHECK_THROWS_WITH(ivol::read_pgm((dir / "p2.pgm").string()),
                    Catch::Matchers::ContainsSubstring("P5"));
}

TEST_CASE("acquisition directories round-trip", "[datasim][io]") {
  Phantom ph = generate_phantom(24, 3);
  AcquisitionSet set = sample_slices(ph.volume, 5, 0.08, 11);
  set.noisy_poses = perturb_poses(set.true_poses, 0.2, 4.0, 24, 12);

  const fs::path dir = scratch_dir("acq") / "run1";
  ivol::save_acquisition(dir.string(), set);
  CHECK(fs::exists(dir / "poses.csv"));
  CHECK(fs::exists(dir / "slice_0000.pgm"));
  CHECK(fs::exists(dir / "slice_0004.pgm"));

  AcquisitionSet loaded = ivol::load_acquisition(dir.string());
  REQUIRE(loaded.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    // Poses survive exactly (shortest round-trip formatting).
    CHECK(loaded.true_poses[i] == set.true_poses[i]);
    CHECK(loaded.noisy_poses[i] == set.noisy_poses[i]);
    // Images survive up to 8-bit quantization.
    REQUIRE(loaded.images[i].pixels() == set.images[i].pixels());
    for (int p = 0; p < set.images[i].pixels(); ++p)
      CHECK_THAT(loaded.images[i].pix[p],
                 Catch::Matchers::WithinAbs(set.images[i].pix[p], 0.5 / 255.0 + 1e-12));
  }

  SECTION("corrupt pose tables are rejected") {
    ivol::atomic_write_file((dir / "poses.csv").string(), "not,a,header\n1,2,3\n");
    CHECK_THROWS_WITH(ivol::load_acquisition(dir.string()),
                      Catch::Matchers::ContainsSubstring("header"));
  }
}
