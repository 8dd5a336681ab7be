#pragma once

// Evaluation metrics (SSIM, NCC, pose errors) and the differentiable SSIM
// training loss.
//
// SSIM uses the standard settings: Gaussian 11x11 window with sigma = 1.5
// normalized to unit mass, C1 = (0.01)^2, C2 = (0.03)^2 on dynamic range 1,
// and valid-window (no padding) aggregation. The fast path runs separable
// 1-D passes; the taped path expresses the window convolution as one dense
// valid-positions x pixels matrix so it rides on the tape's matmul.

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/autodiff.hpp"
#include "ivol/geometry.hpp"

namespace ivol {

struct SliceImage {
  int h = 0, w = 0;
  std::vector<double> pix;  // row-major, values in [0,1]

  SliceImage() = default;
  SliceImage(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_, fill) {}
  double& at(int r, int c) { return pix[static_cast<std::size_t>(r) * w + c]; }
  double at(int r, int c) const { return pix[static_cast<std::size_t>(r) * w + c]; }
  int pixels() const { return h * w; }
};

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 1e-4;   // (0.01 * range)^2
inline constexpr double kSsimC2 = 9e-4;   // (0.03 * range)^2

namespace detail {

inline const std::array<double, kSsimWindow>& gaussian_kernel() {
  static const std::array<double, kSsimWindow> k = [] {
    std::array<double, kSsimWindow> v{};
    const double c = (kSsimWindow - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      v[i] = std::exp(-(i - c) * (i - c) / (2.0 * kSsimSigma * kSsimSigma));
      sum += v[i];
    }
    for (double& x : v) x /= sum;
    return v;
  }();
  return k;
}

// Separable valid-mode Gaussian filter: (h x w) -> (h-10 x w-10).
inline void valid_blur(std::span<const double> src, int h, int w,
                       std::vector<double>& out) {
  const auto& k = gaussian_kernel();
  const int vw = w - kSsimWindow + 1;
  const int vh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * vw);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < vw; ++c) {
      double s = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * src[r * w + c + i];
      tmp[r * vw + c] = s;
    }
  out.resize(static_cast<std::size_t>(vh) * vw);
  for (int r = 0; r < vh; ++r)
    for (int c = 0; c < vw; ++c) {
      double s = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[(r + i) * vw + c];
      out[r * vw + c] = s;
    }
}

inline void check_ssim_pair(int ah, int aw, int bh, int bw) {
  if (ah != bh || aw != bw)
    throw std::invalid_argument("ssim: shape mismatch, " + std::to_string(ah) + "x" +
                                std::to_string(aw) + " vs " + std::to_string(bh) + "x" +
                                std::to_string(bw));
  if (ah < kSsimWindow || aw < kSsimWindow)
    throw std::invalid_argument("ssim: images must be at least " +
                                std::to_string(kSsimWindow) + "x" +
                                std::to_string(kSsimWindow) + ", got " +
                                std::to_string(ah) + "x" + std::to_string(aw));
}

// Dense valid-window convolution matrix for one image shape, cached because
// the training loop reuses it every step.
struct SsimConvMatrix {
  int valid = 0, pixels = 0;
  std::vector<double> m;  // valid x pixels, row-major
};

inline const SsimConvMatrix& ssim_conv_matrix(int h, int w) {
  static std::map<std::pair<int, int>, SsimConvMatrix> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto [it, inserted] = cache.try_emplace({h, w});
  SsimConvMatrix& cm = it->second;
  if (!inserted) return cm;
  const auto& k = gaussian_kernel();
  const int vh = h - kSsimWindow + 1, vw = w - kSsimWindow + 1;
  cm.valid = vh * vw;
  cm.pixels = h * w;
  cm.m.assign(static_cast<std::size_t>(cm.valid) * cm.pixels, 0.0);
  for (int vr = 0; vr < vh; ++vr)
    for (int vc = 0; vc < vw; ++vc) {
      double* row = cm.m.data() + static_cast<std::size_t>(vr * vw + vc) * cm.pixels;
      for (int i = 0; i < kSsimWindow; ++i)
        for (int j = 0; j < kSsimWindow; ++j)
          row[(vr + i) * w + (vc + j)] = k[i] * k[j];
    }
  return cm;
}

}  // namespace detail

// Mean SSIM over all valid window positions.
inline double ssim(const SliceImage& a, const SliceImage& b) {
  detail::check_ssim_pair(a.h, a.w, b.h, b.w);
  const int n = a.pixels();
  std::vector<double> a2(n), b2(n), ab(n);
  for (int i = 0; i < n; ++i) {
    a2[i] = a.pix[i] * a.pix[i];
    b2[i] = b.pix[i] * b.pix[i];
    ab[i] = a.pix[i] * b.pix[i];
  }
  std::vector<double> ma, mb, ma2, mb2, mab;
  detail::valid_blur(a.pix, a.h, a.w, ma);
  detail::valid_blur(b.pix, a.h, a.w, mb);
  detail::valid_blur(a2, a.h, a.w, ma2);
  detail::valid_blur(b2, a.h, a.w, mb2);
  detail::valid_blur(ab, a.h, a.w, mab);
  double total = 0.0;
  const int v = static_cast<int>(ma.size());
  for (int i = 0; i < v; ++i) {
    const double va = ma2[i] - ma[i] * ma[i];
    const double vb = mb2[i] - mb[i] * mb[i];
    const double cov = mab[i] - ma[i] * mb[i];
    const double num = (2.0 * ma[i] * mb[i] + kSsimC1) * (2.0 * cov + kSsimC2);
    const double den = (ma[i] * ma[i] + mb[i] * mb[i] + kSsimC1) * (va + vb + kSsimC2);
    total += num / den;
  }
  return total / v;
}

// SSIM between a predicted pixel column on the tape and an observed image;
// gradients flow only into `predicted`. Returns the mean-SSIM node.
inline ad::NodeId ssim_taped(ad::Tape& tape, ad::NodeId predicted,
                             const SliceImage& observed) {
  const ad::Shape ps = tape.shape(predicted);
  if (ps.cols != 1 || ps.rows != observed.pixels())
    throw std::invalid_argument("ssim: predicted node is " + ps.str() +
                                ", expected " + std::to_string(observed.pixels()) + "x1");
  detail::check_ssim_pair(observed.h, observed.w, observed.h, observed.w);
  const auto& cm = detail::ssim_conv_matrix(observed.h, observed.w);

  const int n = observed.pixels();
  std::vector<double> y2(n);
  for (int i = 0; i < n; ++i) y2[i] = observed.pix[i] * observed.pix[i];
  std::vector<double> my, my2;
  detail::valid_blur(observed.pix, observed.h, observed.w, my);
  detail::valid_blur(y2, observed.h, observed.w, my2);
  std::vector<double> sy(cm.valid);
  for (int i = 0; i < cm.valid; ++i) sy[i] = my2[i] - my[i] * my[i];

  using ad::NodeId;
  const ad::Shape vcol{cm.valid, 1};
  NodeId conv = tape.constant_ref(cm.m.data(), {cm.valid, cm.pixels});
  NodeId yv = tape.constant(observed.pix, {n, 1});
  NodeId mu_y = tape.constant(my, vcol);
  NodeId sig_y = tape.constant(sy, vcol);

  NodeId mu_x = tape.matmul(conv, predicted);
  NodeId mu_x2 = tape.matmul(conv, tape.mul(predicted, predicted));
  NodeId mu_xy = tape.matmul(conv, tape.mul(predicted, yv));
  NodeId sig_x = tape.sub(mu_x2, tape.mul(mu_x, mu_x));
  NodeId cov = tape.sub(mu_xy, tape.mul(mu_x, mu_y));

  NodeId two = tape.constant(2.0);
  NodeId c1 = tape.constant(kSsimC1);
  NodeId c2 = tape.constant(kSsimC2);
  NodeId num = tape.mul(tape.add(tape.mul(two, tape.mul(mu_x, mu_y)), c1),
                        tape.add(tape.mul(two, cov), c2));
  NodeId den = tape.mul(tape.add(tape.add(tape.mul(mu_x, mu_x), tape.mul(mu_y, mu_y)), c1),
                        tape.add(tape.add(sig_x, sig_y), c2));
  return tape.mean(tape.div(num, den));
}

// Photometric training loss: 1 - ssim(predicted, observed).
inline ad::NodeId ssim_loss(ad::Tape& tape, ad::NodeId predicted,
                            const SliceImage& observed) {
  return tape.sub(tape.constant(1.0), ssim_taped(tape, predicted, observed));
}

// Zero-mean, unit-variance correlation over all elements.
inline double ncc(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("ncc: inputs must be non-empty and the same size, got " +
                                std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  auto degenerate = [](std::span<const double> v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *lo == *hi;
  };
  if (degenerate(a) || degenerate(b))
    throw std::runtime_error("ncc: degenerate constant input");
  const std::size_t n = a.size();
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= n;
  mean_b /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - mean_a, db = b[i] - mean_b;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  return sab / (std::sqrt(saa) * std::sqrt(sbb));
}

inline double ncc(const SliceImage& a, const SliceImage& b) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument("ncc: shape mismatch, " + std::to_string(a.h) + "x" +
                                std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                                std::to_string(b.w));
  return ncc(std::span<const double>(a.pix), std::span<const double>(b.pix));
}

struct PoseError {
  double angle = 0.0;     // radians, mean of per-axis wrapped |differences|
  double distance = 0.0;  // pixels
};

inline double wrap_angle(double a) {
  double d = std::remainder(a, 2.0 * std::numbers::pi);
  if (d <= -std::numbers::pi) d += 2.0 * std::numbers::pi;  // land in (-pi, pi]
  return d;
}

inline PoseError pose_error(const SlicePose& estimated, const SlicePose& truth,
                            int volume_side) {
  PoseError e;
  for (int i = 0; i < 3; ++i)
    e.angle += std::abs(wrap_angle(estimated.euler[i] - truth.euler[i])) / 3.0;
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = estimated.trans[i] - truth.trans[i];
    d2 += d * d;
  }
  e.distance = std::sqrt(d2) * volume_side / 2.0;
  return e;
}

struct MetricReport {
  double ncc = 0.0;
  double ssim = 0.0;
  double angle_error = 0.0;     // radians
  double distance_error = 0.0;  // pixels
};

}  // namespace ivol
