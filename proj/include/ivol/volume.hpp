#pragma once

// Explicit voxel volumes on the [-1,1]^3 world cube: trilinear sampling,
// arbitrary-plane extraction, and the on-disk formats (text-header volume
// files and P5 graymaps).
//
// Voxel (i,j,k) sits at world (2i/(S-1)-1, 2j/(S-1)-1, 2k/(S-1)-1) - i maps
// to x, j to y, k to z - stored k-fastest: index (i*S + j)*S + k. Sampling
// outside the cube reads exactly 0.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/geometry.hpp"
#include "ivol/metrics.hpp"
#include "ivol/util.hpp"

namespace ivol {

struct VoxelVolume {
  int side = 0;
  std::vector<double> vox;  // k-fastest, side^3 values in [0,1]

  VoxelVolume() = default;
  explicit VoxelVolume(int side_, double fill = 0.0)
      : side(side_),
        vox(static_cast<std::size_t>(side_) * side_ * side_, fill) {
    if (side_ < 2) throw std::invalid_argument("VoxelVolume: side must be >= 2");
  }

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * side + j) * side + k;
  }
  double& at(int i, int j, int k) { return vox[index(i, j, k)]; }
  double at(int i, int j, int k) const { return vox[index(i, j, k)]; }

  std::array<double, 3> voxel_center(int i, int j, int k) const {
    const double d = side - 1;
    return {2.0 * i / d - 1.0, 2.0 * j / d - 1.0, 2.0 * k / d - 1.0};
  }

  // Trilinear interpolation at a world point; zero outside the cube.
  double sample_world(double x, double y, double z) const {
    if (x < -1.0 || x > 1.0 || y < -1.0 || y > 1.0 || z < -1.0 || z > 1.0) return 0.0;
    const double half = (side - 1) * 0.5;
    const double gx = (x + 1.0) * half;
    const double gy = (y + 1.0) * half;
    const double gz = (z + 1.0) * half;
    const int i0 = std::min(static_cast<int>(gx), side - 2);
    const int j0 = std::min(static_cast<int>(gy), side - 2);
    const int k0 = std::min(static_cast<int>(gz), side - 2);
    const double fx = gx - i0, fy = gy - j0, fz = gz - k0;
    const double* base = vox.data() + index(i0, j0, k0);
    const std::size_t si = static_cast<std::size_t>(side) * side;
    const std::size_t sj = side;
    const double c00 = base[0] + fx * (base[si] - base[0]);
    const double c01 = base[1] + fx * (base[si + 1] - base[1]);
    const double c10 = base[sj] + fx * (base[si + sj] - base[sj]);
    const double c11 = base[sj + 1] + fx * (base[si + sj + 1] - base[sj + 1]);
    const double c0 = c00 + fy * (c10 - c00);
    const double c1 = c01 + fy * (c11 - c01);
    return c0 + fz * (c1 - c0);
  }
};

// Extracts an h x w image of the plane placed by `pose`; `extent` scales the
// in-plane reference grid (1 spans the full [-1,1] plane, smaller values
// crop centrally).
inline SliceImage sample_plane(const VoxelVolume& vol, const SlicePose& pose, int h,
                               int w, double extent = 1.0) {
  const PlaneGrid grid = reference_grid(h, w);
  const Mat3 r = euler_to_matrix(pose.euler);
  SliceImage img(h, w);
  for (int p = 0; p < grid.pixels(); ++p) {
    const double x = grid.xs[p] * extent;
    const double y = grid.ys[p] * extent;
    img.pix[p] = vol.sample_world(r.m[0] * x + r.m[1] * y + pose.trans[0],
                                  r.m[3] * x + r.m[4] * y + pose.trans[1],
                                  r.m[6] * x + r.m[7] * y + pose.trans[2]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Volume file: five text header lines then a raw little-endian float32
// payload in k-fastest voxel order.
//
//   IVOLVOL1
//   side <S>
//   range 0 1
//   descriptor <free text, no newlines>
//   data
//   <S^3 * 4 bytes>

inline void write_volume(const std::string& path, const VoxelVolume& vol,
                         std::string descriptor = "") {
  for (char& c : descriptor)
    if (c == '\n' || c == '\r') c = ' ';
  std::string buf = "IVOLVOL1\nside " + std::to_string(vol.side) +
                    "\nrange 0 1\ndescriptor " + descriptor + "\ndata\n";
  buf.reserve(buf.size() + vol.vox.size() * 4);
  for (double v : vol.vox) {
    const float f = static_cast<float>(clamp_intensity(v));
    char b[4];
    std::memcpy(b, &f, 4);
    buf.append(b, 4);
  }
  atomic_write_file(path, buf);
}

struct LoadedVolume {
  VoxelVolume volume;
  std::string descriptor;
};

inline LoadedVolume read_volume(const std::string& path) {
  const std::string data = read_file(path);
  const std::string ctx = "volume " + path;
  std::size_t at = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = data.find('\n', at);
    if (nl == std::string::npos)
      throw std::runtime_error(ctx + ": malformed header (unterminated line)");
    std::string line = data.substr(at, nl - at);
    at = nl + 1;
    return line;
  };
  if (next_line() != "IVOLVOL1")
    throw std::runtime_error(ctx + ": malformed header (bad magic)");
  const std::string side_line = next_line();
  if (side_line.rfind("side ", 0) != 0)
    throw std::runtime_error(ctx + ": malformed header (missing side)");
  int side = 0;
  try {
    side = std::stoi(side_line.substr(5));
  } catch (const std::exception&) {
    throw std::runtime_error(ctx + ": malformed header (unparseable side)");
  }
  if (side < 2 || side > 4096)
    throw std::runtime_error(ctx + ": implausible side " + std::to_string(side));
  if (next_line() != "range 0 1")
    throw std::runtime_error(ctx + ": malformed header (unsupported range)");
  const std::string desc_line = next_line();
  if (desc_line.rfind("descriptor", 0) != 0)
    throw std::runtime_error(ctx + ": malformed header (missing descriptor)");
  std::string descriptor =
      desc_line.size() > 11 ? desc_line.substr(11) : std::string();
  if (next_line() != "data")
    throw std::runtime_error(ctx + ": malformed header (missing data marker)");

  VoxelVolume vol(side);
  const std::size_t want = vol.vox.size() * 4;
  if (data.size() - at < want)
    throw std::runtime_error(ctx + ": truncated payload (have " +
                             std::to_string(data.size() - at) + " bytes, need " +
                             std::to_string(want) + ")");
  if (data.size() - at > want)
    throw std::runtime_error(ctx + ": trailing bytes after payload");
  for (std::size_t i = 0; i < vol.vox.size(); ++i) {
    float f;
    std::memcpy(&f, data.data() + at + i * 4, 4);
    vol.vox[i] = f;
  }
  return {std::move(vol), std::move(descriptor)};
}

// ---------------------------------------------------------------------------
// 8-bit binary graymap (P5), byte = round(intensity * 255).

inline void write_pgm(const std::string& path, const SliceImage& img) {
  std::string buf =
      "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  buf.reserve(buf.size() + img.pix.size());
  for (double v : img.pix) {
    const long byte = std::lround(clamp_intensity(v) * 255.0);
    buf.push_back(static_cast<char>(static_cast<unsigned char>(byte)));
  }
  atomic_write_file(path, buf);
}

inline SliceImage read_pgm(const std::string& path) {
  const std::string data = read_file(path);
  const std::string ctx = "pgm " + path;
  std::size_t at = 0;
  auto skip_space = [&] {
    while (at < data.size()) {
      if (std::isspace(static_cast<unsigned char>(data[at]))) {
        ++at;
      } else if (data[at] == '#') {
        while (at < data.size() && data[at] != '\n') ++at;
      } else {
        break;
      }
    }
  };
  auto next_int = [&]() -> int {
    skip_space();
    std::size_t start = at;
    while (at < data.size() && std::isdigit(static_cast<unsigned char>(data[at]))) ++at;
    if (at == start) throw std::runtime_error(ctx + ": malformed header");
    return std::stoi(data.substr(start, at - start));
  };
  if (data.size() < 2 || data[0] != 'P' || data[1] != '5')
    throw std::runtime_error(ctx + ": not a P5 graymap");
  at = 2;
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w < 1 || h < 1) throw std::runtime_error(ctx + ": bad dimensions");
  if (maxval != 255) throw std::runtime_error(ctx + ": unsupported maxval");
  ++at;  // single whitespace after maxval
  const std::size_t want = static_cast<std::size_t>(w) * h;
  if (data.size() - at < want)
    throw std::runtime_error(ctx + ": truncated payload");
  SliceImage img(h, w);
  for (std::size_t i = 0; i < want; ++i)
    img.pix[i] = static_cast<unsigned char>(data[at + i]) / 255.0;
  return img;
}

}  // namespace ivol
