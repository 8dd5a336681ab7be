#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "ivol/datasim.hpp"
#include "ivol/evaluate.hpp"
#include "ivol/siren.hpp"
#include "ivol/volume.hpp"

// Path baked in by the build so the suite always tests the matching binary.
#ifndef IVOL_CLI_PATH
#error "IVOL_CLI_PATH must be defined"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

fs::path scratch_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "ivol_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

RunResult run(const std::string& args) {
  const fs::path log = scratch_root() / "run.log";
  const std::string cmd =
      std::string(IVOL_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = ivol::read_file(log.string());
  return r;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
  return ivol::read_file(a.string()) == ivol::read_file(b.string());
}

}  // namespace

TEST_CASE("usage errors exit nonzero, help exits zero", "[cli]") {
  CHECK(run("").code != 0);
  CHECK(run("--help").code == 0);
  CHECK(run("simulate --n 0 --out x").code != 0);          // rejected range
  CHECK(run("simulate --out x").code != 0);                // missing --n
  CHECK(run("frobnicate").code != 0);                      // unknown command
  CHECK(run("reconstruct --acq a --method magic --out x").code != 0);
}

TEST_CASE("simulate writes a complete acquisition directory", "[cli]") {
  const fs::path acq = scratch_root() / "acq_clean";
  const RunResult r = run("simulate --phantom-seed 3 --phantom-side 32 --n 4"
                          " --slice-size 24 --out " + acq.string());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(acq / "poses.csv"));
  CHECK(fs::exists(acq / "truth.ivol"));
  CHECK(fs::exists(acq / "manifest.json"));
  for (int i = 0; i < 4; ++i) CHECK(fs::exists(acq / ivol::slice_filename(i)));

  // Zero noise: the noisy columns equal the true columns exactly.
  ivol::AcquisitionSet set;
  ivol::read_poses_csv((acq / "poses.csv").string(), set);
  REQUIRE(set.true_poses.size() == 4);
  for (std::size_t i = 0; i < set.true_poses.size(); ++i)
    CHECK(set.true_poses[i] == set.noisy_poses[i]);

  const ivol::LoadedVolume truth = ivol::read_volume((acq / "truth.ivol").string());
  CHECK(truth.volume.side == 32);
}

TEST_CASE("simulate with noise perturbs the noisy columns only", "[cli]") {
  const fs::path acq = scratch_root() / "acq_noisy";
  REQUIRE(run("simulate --phantom-seed 3 --phantom-side 32 --n 4 --slice-size 24"
              " --sigma-angle 0.2 --sigma-trans 4 --out " + acq.string()).code == 0);
  ivol::AcquisitionSet set;
  ivol::read_poses_csv((acq / "poses.csv").string(), set);
  bool any_differ = false;
  for (std::size_t i = 0; i < set.true_poses.size(); ++i)
    any_differ = any_differ || !(set.true_poses[i] == set.noisy_poses[i]);
  CHECK(any_differ);

  // Same command, fresh directory: byte-identical outputs.
  const fs::path again = scratch_root() / "acq_noisy2";
  REQUIRE(run("simulate --phantom-seed 3 --phantom-side 32 --n 4 --slice-size 24"
              " --sigma-angle 0.2 --sigma-trans 4 --out " + again.string()).code == 0);
  CHECK(same_file_bytes(acq / "poses.csv", again / "poses.csv"));
  CHECK(same_file_bytes(acq / "truth.ivol", again / "truth.ivol"));
  CHECK(same_file_bytes(acq / "slice_0002.pgm", again / "slice_0002.pgm"));
  CHECK(same_file_bytes(acq / "manifest.json", again / "manifest.json"));
}

TEST_CASE("baseline reconstruction writes a volume of the requested side", "[cli]") {
  const fs::path acq = scratch_root() / "acq_clean";
  const fs::path out = scratch_root() / "recon_base";
  const RunResult r = run("reconstruct --acq " + acq.string() +
                          " --method baseline --side 24 --out " + out.string());
  REQUIRE(r.code == 0);
  const ivol::LoadedVolume vol = ivol::read_volume((out / "volume.ivol").string());
  CHECK(vol.volume.side == 24);
  CHECK(r.out.find(" s") != std::string::npos);  // wall-clock in the summary
}

TEST_CASE("implicit reconstruction with zero epochs stores the initial state", "[cli]") {
  const fs::path acq = scratch_root() / "acq_noisy";
  const fs::path out = scratch_root() / "recon_zero";
  REQUIRE(run("reconstruct --acq " + acq.string() +
              " --method implicit --epochs 0 --l 4 --seed 9 --out " +
              out.string()).code == 0);

  const ivol::Checkpoint ckpt =
      ivol::load_checkpoint((out / "checkpoint.ivol").string());
  // Poses are the untouched noisy inputs.
  ivol::AcquisitionSet set;
  ivol::read_poses_csv((acq / "poses.csv").string(), set);
  REQUIRE(ckpt.poses.size() == set.noisy_poses.size());
  for (std::size_t i = 0; i < ckpt.poses.size(); ++i)
    CHECK(ckpt.poses[i] == set.noisy_poses[i]);
  // The network is exactly the seeded initialization.
  const ivol::ImplicitVolume fresh = ivol::ImplicitVolume::init(4, 9, true);
  for (int l = 0; l < fresh.layers(); ++l) {
    const auto a = ckpt.net.weight(l), b = fresh.weight(l);
    CHECK(std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
  }
  CHECK(fs::exists(out / "loss.csv"));
  CHECK(ivol::read_file((out / "loss.csv").string()) ==
        "epoch,mean_loss,network_lr,pose_lr\n");
}

TEST_CASE("implicit reconstruction is reproducible byte for byte", "[cli]") {
  const fs::path acq = scratch_root() / "acq_noisy";
  const fs::path out1 = scratch_root() / "recon_rep1";
  const fs::path out2 = scratch_root() / "recon_rep2";
  const std::string flags = " --method implicit --epochs 2 --l 4 --joint --out ";
  REQUIRE(run("reconstruct --acq " + acq.string() + flags + out1.string()).code == 0);
  REQUIRE(run("reconstruct --acq " + acq.string() + flags + out2.string()).code == 0);
  CHECK(same_file_bytes(out1 / "checkpoint.ivol", out2 / "checkpoint.ivol"));
  CHECK(same_file_bytes(out1 / "loss.csv", out2 / "loss.csv"));
}

TEST_CASE("evaluating the truth against itself is perfect", "[cli]") {
  const fs::path acq = scratch_root() / "acq_clean";
  const fs::path csv = scratch_root() / "self.csv";
  const RunResult r = run("evaluate --recon " + (acq / "truth.ivol").string() +
                          " --truth " + (acq / "truth.ivol").string() + " --acq " +
                          acq.string() + " --planes axial,coronal --slices-per-plane 3"
                          " --approach truth --out " + csv.string());
  REQUIRE(r.code == 0);
  const auto rows = ivol::read_metrics_csv(csv.string());
  REQUIRE(rows.size() == 4);  // mean + sd rows for two planes
  for (const auto& row : rows) {
    CHECK(row.approach == "truth");
    CHECK(row.n == 4);
    if (row.plane.ends_with("_sd")) continue;
    CHECK(row.ncc > 1.0 - 1e-6);
    CHECK(row.ssim > 1.0 - 1e-6);
  }
  CHECK(fs::exists(csv.string() + ".manifest.json"));

  CHECK(run("evaluate --recon missing.ivol --truth " + (acq / "truth.ivol").string() +
            " --out x.csv").code != 0);
  CHECK(run("evaluate --recon " + (acq / "truth.ivol").string() + " --truth " +
            (acq / "truth.ivol").string() + " --planes bogus --out x.csv").code != 0);
}

TEST_CASE("rendered resolutions agree on shared lattice points", "[cli]") {
  const fs::path out = scratch_root() / "recon_zero";
  const fs::path lo_p = scratch_root() / "lo.pgm";
  const fs::path hi_p = scratch_root() / "hi.pgm";
  const std::string ckpt = (out / "checkpoint.ivol").string();
  REQUIRE(run("render --recon " + ckpt + " --pose 0.1,0.4,-0.2,0,0.05,0 --size 33 33"
              " --out " + lo_p.string()).code == 0);
  REQUIRE(run("render --recon " + ckpt + " --pose 0.1,0.4,-0.2,0,0.05,0 --size 65 65"
              " --out " + hi_p.string()).code == 0);
  const ivol::SliceImage lo = ivol::read_pgm(lo_p.string());
  const ivol::SliceImage hi = ivol::read_pgm(hi_p.string());
  // Grid points of the 33-grid all appear in the 65-grid at doubled indices;
  // the only disagreement allowed is one quantization step.
  for (int r = 0; r < 33; ++r)
    for (int c = 0; c < 33; ++c)
      CHECK(std::abs(hi.at(2 * r, 2 * c) - lo.at(r, c)) <= 1.0 / 255.0 + 1e-12);

  CHECK(run("render --recon " + ckpt + " --pose 1,2 --out bad.pgm").code != 0);
}

TEST_CASE("rendering a volume at identity matches its central plane", "[cli]") {
  // Odd side so the z = 0 plane is exactly a lattice plane.
  const fs::path acq = scratch_root() / "acq_odd";
  REQUIRE(run("simulate --phantom-seed 5 --phantom-side 33 --n 1 --out " +
              acq.string()).code == 0);
  const fs::path img_p = scratch_root() / "central.pgm";
  REQUIRE(run("render --recon " + (acq / "truth.ivol").string() +
              " --size 33 33 --out " + img_p.string()).code == 0);
  const ivol::SliceImage img = ivol::read_pgm(img_p.string());
  const ivol::VoxelVolume vol =
      ivol::read_volume((acq / "truth.ivol").string()).volume;
  for (int r = 0; r < 33; ++r)
    for (int c = 0; c < 33; ++c)
      CHECK(std::abs(img.at(r, c) - vol.at(c, r, 16)) <= 1.0 / 255.0 + 1e-12);
}
