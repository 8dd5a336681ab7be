#pragma once

// The implicit volume network F_theta: encoded coordinate features -> raw
// intensity. Five dense layers: four sine-activated hidden layers of width
// 128 and a linear output. The first layer's pre-activation is scaled by
// omega0 = 30 before the sine.
//
// Raw outputs are unbounded; clamp_intensity() is applied only when
// rendering or exporting, never inside the training loss.

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/autodiff.hpp"
#include "ivol/geometry.hpp"
#include "ivol/util.hpp"

namespace ivol {

struct SirenConfig {
  int levels = 10;          // positional encoding depth L
  bool use_encoding = true; // false: feed raw (x,y,z)
  double omega0 = 30.0;
  int hidden = 128;
  int hidden_layers = 4;    // sine layers; a linear output layer follows
};

class ImplicitVolume {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;

 public:
  ImplicitVolume() : ImplicitVolume(SirenConfig{}) {}

  explicit ImplicitVolume(const SirenConfig& cfg) : cfg_(cfg) {
    if (cfg.levels < 1) throw std::invalid_argument("ImplicitVolume: levels must be >= 1");
    if (cfg.hidden < 1 || cfg.hidden_layers < 1)
      throw std::invalid_argument("ImplicitVolume: network dimensions must be positive");
    dims_.push_back(encode_dim(cfg.levels, cfg.use_encoding));
    for (int i = 0; i < cfg.hidden_layers; ++i) dims_.push_back(cfg.hidden);
    dims_.push_back(1);
    weights_.resize(layers());
    biases_.resize(layers());
    for (int l = 0; l < layers(); ++l) {
      weights_[l].assign(static_cast<std::size_t>(in_dim(l)) * out_dim(l), 0.0);
      biases_[l].assign(out_dim(l), 0.0);
    }
  }

  // Deterministic initialization: first layer U(-1/fan_in, 1/fan_in), later
  // layers U(-sqrt(6/fan_in)/omega0, +...), biases U(-1/sqrt(fan_in), +...).
  static ImplicitVolume init(int levels, std::uint64_t seed, bool use_encoding = true) {
    SirenConfig cfg;
    cfg.levels = levels;
    cfg.use_encoding = use_encoding;
    ImplicitVolume net(cfg);
    net.randomize(seed);
    return net;
  }

  void randomize(std::uint64_t seed) {
    Rng rng(seed);
    for (int l = 0; l < layers(); ++l) {
      const double fan_in = in_dim(l);
      const double wb = (l == 0) ? 1.0 / fan_in : std::sqrt(6.0 / fan_in) / cfg_.omega0;
      for (double& w : weights_[l]) w = rng.uniform(-wb, wb);
      const double bb = 1.0 / std::sqrt(fan_in);
      for (double& b : biases_[l]) b = rng.uniform(-bb, bb);
    }
  }

  const SirenConfig& config() const { return cfg_; }
  int layers() const { return static_cast<int>(dims_.size()) - 1; }
  int in_dim(int layer) const { return dims_[layer]; }
  int out_dim(int layer) const { return dims_[layer + 1]; }
  int feature_dim() const { return dims_.front(); }
  const std::vector<int>& dims() const { return dims_; }

  std::span<double> weight(int layer) { return weights_[layer]; }
  std::span<double> bias(int layer) { return biases_[layer]; }
  std::span<const double> weight(int layer) const { return weights_[layer]; }
  std::span<const double> bias(int layer) const { return biases_[layer]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < layers(); ++l) n += weights_[l].size() + biases_[l].size();
    return n;
  }

  // Raw (unclamped) intensities for `count` feature rows. Pure; safe to call
  // concurrently on a frozen network.
  void forward(std::span<const double> features, int count,
               std::vector<double>& out) const {
    const int in = feature_dim();
    if (static_cast<std::size_t>(count) * in != features.size())
      throw std::invalid_argument(
          "forward: feature length " + std::to_string(features.size()) +
          " does not match " + std::to_string(count) + " points x " + std::to_string(in));
    Mat h = CMap(features.data(), count, in) * CMap(weights_[0].data(), in, out_dim(0));
    apply_layer_tail(h, 0);
    for (int l = 1; l < layers(); ++l) {
      Mat next = h * CMap(weights_[l].data(), in_dim(l), out_dim(l));
      h.swap(next);
      apply_layer_tail(h, l);
    }
    out.assign(h.data(), h.data() + count);
  }

  // Convenience: AoS world points -> encoded features -> intensities,
  // optionally clamped to [0,1] for rendering.
  void forward_points(std::span<const double> points, std::vector<double>& out,
                      bool clamp) const {
    std::vector<double> feats;
    positional_encode(points, cfg_.levels, feats, cfg_.use_encoding);
    forward(feats, static_cast<int>(points.size() / 3), out);
    if (clamp)
      for (double& v : out) v = clamp_intensity(v);
  }

  // ---- taped path -------------------------------------------------------

  struct TapedParams {
    std::vector<ad::NodeId> w, b;
  };

  // Registers every parameter as a trainable leaf on the tape.
  TapedParams record_params(ad::Tape& tape) const {
    TapedParams p;
    for (int l = 0; l < layers(); ++l) {
      p.w.push_back(tape.leaf(weights_[l], {in_dim(l), out_dim(l)}));
      p.b.push_back(tape.leaf(biases_[l], {1, out_dim(l)}));
    }
    return p;
  }

  ad::NodeId forward_taped(ad::Tape& tape, const TapedParams& params,
                           ad::NodeId features) const {
    if (tape.shape(features).cols != feature_dim())
      throw std::invalid_argument("forward_taped: feature dim " +
                                  std::to_string(tape.shape(features).cols) +
                                  " does not match network input " +
                                  std::to_string(feature_dim()));
    ad::NodeId h = features;
    for (int l = 0; l < layers(); ++l) {
      h = tape.add(tape.matmul(h, params.w[l]), params.b[l]);
      if (l == 0) h = tape.mul(h, tape.constant(cfg_.omega0));
      if (l + 1 < layers()) h = tape.sin(h);
    }
    return h;
  }

 private:
  void apply_layer_tail(Mat& h, int layer) const {
    const double* b = biases_[layer].data();
    double* d = h.data();
    const std::int64_t rows = h.rows(), cols = h.cols();
    const bool sine = layer + 1 < layers();
    const double scale = (layer == 0) ? cfg_.omega0 : 1.0;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c) {
        double v = (d[r * cols + c] + b[c]) * scale;
        d[r * cols + c] = sine ? std::sin(v) : v;
      }
  }

  SirenConfig cfg_;
  std::vector<int> dims_;
  std::vector<std::vector<double>> weights_;  // row-major in_dim x out_dim
  std::vector<std::vector<double>> biases_;
};

// ---------------------------------------------------------------------------
// Checkpoint file: little-endian binary. Magic "IVOL1", u32 L, f64 omega0,
// u32 dim count, dims as u32, then per layer the weight matrix (row-major
// f64) followed by the bias vector, then u64 pose count and N x 6 f64 poses
// (rx, ry, rz, tx, ty, tz).

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  s.append(b, 4);
}
inline void put_u64(std::string& s, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  s.append(b, 8);
}
inline void put_f64(std::string& s, double v) {
  char b[8];
  std::memcpy(b, &v, 8);
  s.append(b, 8);
}

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context)
      : data_(data), ctx_(std::move(context)) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + at_, n);
    at_ += n;
  }
  bool exhausted() const { return at_ == data_.size(); }
  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (data_.substr(at_, magic.size()) != magic)
      throw std::runtime_error(ctx_ + ": bad magic, not a recognized file");
    at_ += magic.size();
  }

 private:
  template <class T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void need(std::size_t n) {
    if (at_ + n > data_.size())
      throw std::runtime_error(ctx_ + ": truncated file (needed " + std::to_string(n) +
                               " more bytes at offset " + std::to_string(at_) + ")");
  }
  std::string_view data_;
  std::string ctx_;
  std::size_t at_ = 0;
};

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "IVOL1";

inline void save_checkpoint(const std::string& path, const ImplicitVolume& net,
                            std::span<const SlicePose> poses) {
  std::string buf;
  buf.append(kCheckpointMagic);
  detail::put_u32(buf, static_cast<std::uint32_t>(net.config().levels));
  detail::put_f64(buf, net.config().omega0);
  const auto& dims = net.dims();
  detail::put_u32(buf, static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  for (int l = 0; l < net.layers(); ++l) {
    for (double w : net.weight(l)) detail::put_f64(buf, w);
    for (double b : net.bias(l)) detail::put_f64(buf, b);
  }
  detail::put_u64(buf, poses.size());
  for (const SlicePose& p : poses) {
    for (double e : p.euler) detail::put_f64(buf, e);
    for (double t : p.trans) detail::put_f64(buf, t);
  }
  atomic_write_file(path, buf);
}

struct Checkpoint {
  ImplicitVolume net;
  std::vector<SlicePose> poses;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  detail::ByteReader r(data, "checkpoint " + path);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t levels = r.u32();
  const double omega0 = r.f64();
  const std::uint32_t ndims = r.u32();
  if (levels < 1 || ndims < 2 || ndims > 64)
    throw std::runtime_error("checkpoint " + path + ": implausible header (L=" +
                             std::to_string(levels) + ", dims=" + std::to_string(ndims) + ")");
  std::vector<int> dims(ndims);
  for (auto& d : dims) d = static_cast<int>(r.u32());

  SirenConfig cfg;
  cfg.levels = static_cast<int>(levels);
  cfg.omega0 = omega0;
  cfg.use_encoding = dims.front() != 3;
  cfg.hidden = dims[1];
  cfg.hidden_layers = static_cast<int>(ndims) - 2;
  ImplicitVolume net(cfg);
  if (net.dims() != dims)
    throw std::runtime_error("checkpoint " + path + ": layer dims do not form a supported network");
  for (int l = 0; l < net.layers(); ++l) {
    r.raw(net.weight(l).data(), net.weight(l).size() * sizeof(double));
    r.raw(net.bias(l).data(), net.bias(l).size() * sizeof(double));
  }
  const std::uint64_t n = r.u64();
  if (n > (1ull << 32))
    throw std::runtime_error("checkpoint " + path + ": implausible pose count");
  std::vector<SlicePose> poses(n);
  for (auto& p : poses) {
    for (double& e : p.euler) e = r.f64();
    for (double& t : p.trans) t = r.f64();
  }
  if (!r.exhausted())
    throw std::runtime_error("checkpoint " + path + ": trailing bytes after pose table");
  return {std::move(net), std::move(poses)};
}

}  // namespace ivol
