#pragma once

// Reverse-mode automatic differentiation over dense row-major 2-D values.
// A Tape records eagerly-evaluated nodes (define-by-run); backward() walks
// the tape once in reverse id order and accumulates adjoints into every
// registered trainable leaf. Values are double precision throughout.
//
// Shapes: everything is rows x cols. Scalars are 1x1, column vectors Px1.
// Elementwise binary ops broadcast a 1x1 scalar or a 1xC row vector against
// a matrix; all other shape combinations are errors.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ivol/util.hpp"

namespace ivol::ad {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kSin,
  kCos,
  kMatMul,
  kSum,
  kMean,
  kClampGradPassthrough,
  kConcatCols,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kSin: return "sin";
    case OpKind::kCos: return "cos";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kClampGradPassthrough: return "clamp_grad_passthrough";
    case OpKind::kConcatCols: return "concat_cols";
  }
  return "?";
}

struct Shape {
  int rows = 1;
  int cols = 1;
  int size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Accumulated gradients for the tape's trainable leaves, keyed by leaf node
// id. A registered leaf that the loss never touched reads back as zeros.
class GradStore {
 public:
  std::span<const double> grad(NodeId leaf) const {
    auto it = grads_.find(leaf);
    if (it == grads_.end()) throw TapeError("grad: node is not a registered leaf");
    return it->second;
  }
  bool has(NodeId leaf) const { return grads_.contains(leaf); }

 private:
  friend class Tape;
  std::unordered_map<NodeId, std::vector<double>> grads_;
};

class Tape {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  // How a binary op's operand maps onto the output element (i, j):
  // index = i*row_stride + j*col_stride. Covers full / row-vector / scalar.
  struct Strides {
    std::int64_t row = 0, col = 0;
  };

  struct Node {
    OpKind op;
    Shape shape;
    std::int64_t offset = -1;     // into value arena; -1 for external constants
    const double* external = nullptr;
    std::int64_t aux = -1;        // trig derivative cache
    std::int32_t in_begin = 0, in_count = 0;
    double p0 = 0, p1 = 0;        // clamp bounds
  };

 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Drops all nodes but keeps arena capacity for the next iteration.
  void reset() {
    nodes_.clear();
    inputs_.clear();
    leaves_.clear();
    values_.clear();
    aux_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Trainable leaf; its gradient appears in the GradStore after backward().
  NodeId leaf(std::span<const double> value, Shape shape) {
    NodeId id = push_value_node(OpKind::kLeaf, shape, value);
    leaves_.push_back(id);
    return id;
  }
  NodeId leaf(double value) { return leaf({&value, 1}, {1, 1}); }

  // Non-trainable input, copied into the tape.
  NodeId constant(std::span<const double> value, Shape shape) {
    return push_value_node(OpKind::kConstant, shape, value);
  }
  NodeId constant(double value) { return constant({&value, 1}, {1, 1}); }

  // Non-trainable input held by reference; caller keeps `data` alive for the
  // lifetime of this tape generation. Avoids copying large fixed operands.
  NodeId constant_ref(const double* data, Shape shape) {
    Node n;
    n.op = OpKind::kConstant;
    n.shape = shape;
    n.external = data;
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const std::vector<NodeId>& leaves() const { return leaves_; }

  // The span points into the tape's arena and is invalidated by the next
  // record()/leaf()/constant() call; copy it if you need it to outlive that.
  std::span<const double> value(NodeId id) const {
    const Node& n = node(id);
    const double* p = n.external ? n.external : values_.data() + n.offset;
    return {p, static_cast<std::size_t>(n.shape.size())};
  }
  Shape shape(NodeId id) const { return node(id).shape; }

  double scalar_value(NodeId id) const {
    if (shape(id) != Shape{1, 1})
      throw TapeError(std::string("scalar_value: node is ") + shape(id).str());
    return value(id)[0];
  }

  // Generic record entry. p0/p1 carry the clamp bounds for
  // clamp_grad_passthrough and are ignored elsewhere.
  NodeId record(OpKind op, std::span<const NodeId> inputs, double p0 = 0.0,
                double p1 = 0.0) {
    for (NodeId in : inputs) {
      if (in < 0 || in >= static_cast<NodeId>(nodes_.size()))
        throw TapeError(std::string(op_name(op)) + ": input id " +
                        std::to_string(in) + " does not exist on the tape");
    }
    switch (op) {
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul:
      case OpKind::kDiv:
        require_inputs(op, inputs, 2);
        return binary(op, inputs[0], inputs[1]);
      case OpKind::kSin:
      case OpKind::kCos:
        require_inputs(op, inputs, 1);
        return trig(op, inputs[0]);
      case OpKind::kMatMul:
        require_inputs(op, inputs, 2);
        return matmul_node(inputs[0], inputs[1]);
      case OpKind::kSum:
      case OpKind::kMean:
        require_inputs(op, inputs, 1);
        return reduce(op, inputs[0]);
      case OpKind::kClampGradPassthrough:
        require_inputs(op, inputs, 1);
        return clamp_node(inputs[0], p0, p1);
      case OpKind::kConcatCols:
        if (inputs.empty()) throw TapeError("concat_cols: needs at least one input");
        return concat_node(inputs);
      case OpKind::kLeaf:
      case OpKind::kConstant:
        throw TapeError("record: leaf/constant are created via leaf()/constant()");
    }
    throw TapeError("record: unknown op kind");
  }
  NodeId record(OpKind op, std::initializer_list<NodeId> inputs, double p0 = 0.0,
                double p1 = 0.0) {
    return record(op, std::span<const NodeId>(inputs.begin(), inputs.size()), p0, p1);
  }

  NodeId add(NodeId a, NodeId b) { return record(OpKind::kAdd, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return record(OpKind::kSub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return record(OpKind::kMul, {a, b}); }
  NodeId div(NodeId a, NodeId b) { return record(OpKind::kDiv, {a, b}); }
  NodeId sin(NodeId a) { return record(OpKind::kSin, {a}); }
  NodeId cos(NodeId a) { return record(OpKind::kCos, {a}); }
  NodeId matmul(NodeId a, NodeId b) { return record(OpKind::kMatMul, {a, b}); }
  NodeId sum(NodeId a) { return record(OpKind::kSum, {a}); }
  NodeId mean(NodeId a) { return record(OpKind::kMean, {a}); }
  NodeId clamp_grad_passthrough(NodeId a, double lo = 0.0, double hi = 1.0) {
    return record(OpKind::kClampGradPassthrough, {a}, lo, hi);
  }
  NodeId concat_cols(std::span<const NodeId> parts) {
    return record(OpKind::kConcatCols, parts);
  }

  // Reverse pass from a scalar loss node. Visits every node at most once in
  // reverse id order; adjoints of fan-out accumulate additively.
  GradStore backward(NodeId loss) const {
    if (shape(loss) != Shape{1, 1})
      throw TapeError("backward: loss node must be scalar, got " + shape(loss).str());
    adjoint_.assign(values_.size(), 0.0);
    if (node(loss).offset >= 0) adjoint_[node(loss).offset] = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
      const Node& n = node(id);
      if (n.op == OpKind::kLeaf || n.op == OpKind::kConstant) continue;
      if (n.offset < 0) continue;
      const double* g = adjoint_.data() + n.offset;
      propagate(n, g);
    }

    GradStore store;
    for (NodeId lid : leaves_) {
      const Node& n = node(lid);
      const double* a = adjoint_.data() + n.offset;
      store.grads_.emplace(lid, std::vector<double>(a, a + n.shape.size()));
    }
    return store;
  }

 private:
  const Node& node(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw TapeError("node id " + std::to_string(id) + " does not exist");
    return nodes_[id];
  }

  void require_inputs(OpKind op, std::span<const NodeId> in, int n) const {
    if (static_cast<int>(in.size()) != n)
      throw TapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                      " inputs, got " + std::to_string(in.size()));
  }

  NodeId push_value_node(OpKind op, Shape shape, std::span<const double> value) {
    if (static_cast<int>(value.size()) != shape.size())
      throw TapeError(std::string(op_name(op)) + ": value size " +
                      std::to_string(value.size()) + " does not match shape " +
                      shape.str());
    Node n;
    n.op = op;
    n.shape = shape;
    n.offset = static_cast<std::int64_t>(values_.size());
    values_.insert(values_.end(), value.begin(), value.end());
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_empty_node(OpKind op, Shape shape, std::span<const NodeId> inputs,
                         bool with_aux = false) {
    Node n;
    n.op = op;
    n.shape = shape;
    n.offset = static_cast<std::int64_t>(values_.size());
    values_.resize(values_.size() + shape.size());
    if (with_aux) {
      n.aux = static_cast<std::int64_t>(aux_.size());
      aux_.resize(aux_.size() + shape.size());
    }
    n.in_begin = static_cast<std::int32_t>(inputs_.size());
    n.in_count = static_cast<std::int32_t>(inputs.size());
    inputs_.insert(inputs_.end(), inputs.begin(), inputs.end());
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::span<const NodeId> node_inputs(const Node& n) const {
    return {inputs_.data() + n.in_begin, static_cast<std::size_t>(n.in_count)};
  }

  const double* data(const Node& n) const {
    return n.external ? n.external : values_.data() + n.offset;
  }
  double* out(const Node& n) { return values_.data() + n.offset; }

  static Strides strides_for(Shape operand, Shape out) {
    if (operand == out) return {operand.cols, 1};
    if (operand.rows == 1 && operand.cols == 1) return {0, 0};
    if (operand.rows == 1 && operand.cols == out.cols) return {0, 1};
    return {-1, -1};
  }

  NodeId binary(OpKind op, NodeId ia, NodeId ib) {
    Shape sa = shape(ia), sb = shape(ib);
    Shape so = (sa.size() >= sb.size()) ? sa : sb;
    Strides sta = strides_for(sa, so), stb = strides_for(sb, so);
    if (sta.row < 0 || stb.row < 0)
      throw TapeError(std::string(op_name(op)) + ": incompatible shapes " + sa.str() +
                      " and " + sb.str());
    NodeId id = push_empty_node(op, so, std::array<NodeId, 2>{ia, ib});
    const double* a = data(node(ia));
    const double* b = data(node(ib));
    double* o = out(nodes_[id]);
    const int R = so.rows, C = so.cols;
    auto loop = [&](auto&& f) {
      if (sa == so && sb == so) {
        const std::int64_t n = so.size();
        for (std::int64_t i = 0; i < n; ++i) o[i] = f(a[i], b[i]);
      } else {
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j)
            o[i * C + j] = f(a[i * sta.row + j * sta.col], b[i * stb.row + j * stb.col]);
      }
    };
    switch (op) {
      case OpKind::kAdd: loop([](double x, double y) { return x + y; }); break;
      case OpKind::kSub: loop([](double x, double y) { return x - y; }); break;
      case OpKind::kMul: loop([](double x, double y) { return x * y; }); break;
      case OpKind::kDiv: loop([](double x, double y) { return x / y; }); break;
      default: break;
    }
    return id;
  }

  NodeId trig(OpKind op, NodeId ia) {
    Shape s = shape(ia);
    NodeId id = push_empty_node(op, s, std::array<NodeId, 1>{ia}, /*with_aux=*/true);
    const double* a = data(node(ia));
    Node& n = nodes_[id];
    double* o = out(n);
    double* dv = aux_.data() + n.aux;
    const std::int64_t len = s.size();
    if (op == OpKind::kSin) {
      for (std::int64_t i = 0; i < len; ++i) sincos_both(a[i], &o[i], &dv[i]);
    } else {
      for (std::int64_t i = 0; i < len; ++i) {
        double sv;
        sincos_both(a[i], &sv, &o[i]);
        dv[i] = -sv;
      }
    }
    return id;
  }

  NodeId matmul_node(NodeId ia, NodeId ib) {
    Shape sa = shape(ia), sb = shape(ib);
    if (sa.cols != sb.rows)
      throw TapeError("matmul: inner dimensions disagree: (" + sa.str() + ")*(" +
                      sb.str() + ")");
    NodeId id =
        push_empty_node(OpKind::kMatMul, {sa.rows, sb.cols}, std::array<NodeId, 2>{ia, ib});
    CMap A(data(node(ia)), sa.rows, sa.cols);
    CMap B(data(node(ib)), sb.rows, sb.cols);
    MMap O(out(nodes_[id]), sa.rows, sb.cols);
    O.noalias() = A * B;
    return id;
  }

  NodeId reduce(OpKind op, NodeId ia) {
    Shape s = shape(ia);
    NodeId id = push_empty_node(op, {1, 1}, std::array<NodeId, 1>{ia});
    const double* a = data(node(ia));
    double acc = 0.0;
    for (int i = 0; i < s.size(); ++i) acc += a[i];
    out(nodes_[id])[0] = (op == OpKind::kMean) ? acc / s.size() : acc;
    return id;
  }

  NodeId clamp_node(NodeId ia, double lo, double hi) {
    Shape s = shape(ia);
    NodeId id =
        push_empty_node(OpKind::kClampGradPassthrough, s, std::array<NodeId, 1>{ia});
    nodes_[id].p0 = lo;
    nodes_[id].p1 = hi;
    const double* a = data(node(ia));
    double* o = out(nodes_[id]);
    for (int i = 0; i < s.size(); ++i) o[i] = std::min(hi, std::max(lo, a[i]));
    return id;
  }

  NodeId concat_node(std::span<const NodeId> parts) {
    int rows = shape(parts[0]).rows;
    int cols = 0;
    for (NodeId p : parts) {
      Shape s = shape(p);
      if (s.rows != rows)
        throw TapeError("concat_cols: row mismatch, " + std::to_string(rows) + " vs " +
                        s.str());
      cols += s.cols;
    }
    NodeId id = push_empty_node(OpKind::kConcatCols, {rows, cols}, parts);
    double* o = out(nodes_[id]);
    int at = 0;
    for (NodeId p : parts) {
      const Node& pn = node(p);
      const double* src = data(pn);
      const int pc = pn.shape.cols;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < pc; ++j) o[i * cols + at + j] = src[i * pc + j];
      at += pc;
    }
    return id;
  }

  bool wants_grad(NodeId id) const { return node(id).op != OpKind::kConstant; }
  double* adj(NodeId id) const {
    return adjoint_.data() + node(id).offset;
  }

  // Scatter g (shaped `out`) into the operand's adjoint, reducing over
  // broadcast dimensions.
  void accumulate_broadcast(NodeId target, Shape out_shape, const double* g,
                            const std::function<double(std::int64_t)>& term) const {
    const Node& t = node(target);
    Shape st = t.shape;
    double* a = adj(target);
    const int R = out_shape.rows, C = out_shape.cols;
    if (st == out_shape) {
      const std::int64_t n = out_shape.size();
      for (std::int64_t i = 0; i < n; ++i) a[i] += term(i);
    } else if (st.rows == 1 && st.cols == 1) {
      double acc = 0.0;
      const std::int64_t n = out_shape.size();
      for (std::int64_t i = 0; i < n; ++i) acc += term(i);
      a[0] += acc;
    } else {
      for (int j = 0; j < C; ++j) {
        double acc = 0.0;
        for (int i = 0; i < R; ++i) acc += term(static_cast<std::int64_t>(i) * C + j);
        a[j] += acc;
      }
    }
    (void)g;
  }

  void propagate(const Node& n, const double* g) const {
    auto in = node_inputs(n);
    switch (n.op) {
      case OpKind::kAdd:
      case OpKind::kSub:
      case OpKind::kMul:
      case OpKind::kDiv: {
        NodeId ia = in[0], ib = in[1];
        const Node& na = node(ia);
        const Node& nb = node(ib);
        Strides sta = strides_for(na.shape, n.shape);
        Strides stb = strides_for(nb.shape, n.shape);
        const double* av = data(na);
        const double* bv = data(nb);
        const int C = n.shape.cols;
        auto a_at = [&](std::int64_t k) {
          return av[(k / C) * sta.row + (k % C) * sta.col];
        };
        auto b_at = [&](std::int64_t k) {
          return bv[(k / C) * stb.row + (k % C) * stb.col];
        };
        if (wants_grad(ia)) {
          switch (n.op) {
            case OpKind::kAdd:
            case OpKind::kSub:
              accumulate_broadcast(ia, n.shape, g, [&](std::int64_t k) { return g[k]; });
              break;
            case OpKind::kMul:
              accumulate_broadcast(ia, n.shape, g,
                                   [&](std::int64_t k) { return g[k] * b_at(k); });
              break;
            case OpKind::kDiv:
              accumulate_broadcast(ia, n.shape, g,
                                   [&](std::int64_t k) { return g[k] / b_at(k); });
              break;
            default: break;
          }
        }
        if (wants_grad(ib)) {
          switch (n.op) {
            case OpKind::kAdd:
              accumulate_broadcast(ib, n.shape, g, [&](std::int64_t k) { return g[k]; });
              break;
            case OpKind::kSub:
              accumulate_broadcast(ib, n.shape, g, [&](std::int64_t k) { return -g[k]; });
              break;
            case OpKind::kMul:
              accumulate_broadcast(ib, n.shape, g,
                                   [&](std::int64_t k) { return g[k] * a_at(k); });
              break;
            case OpKind::kDiv:
              accumulate_broadcast(ib, n.shape, g, [&](std::int64_t k) {
                double b = b_at(k);
                return -g[k] * a_at(k) / (b * b);
              });
              break;
            default: break;
          }
        }
        break;
      }
      case OpKind::kSin:
      case OpKind::kCos: {
        if (!wants_grad(in[0])) break;
        const double* dv = aux_.data() + n.aux;
        double* a = adj(in[0]);
        const std::int64_t len = n.shape.size();
        for (std::int64_t i = 0; i < len; ++i) a[i] += g[i] * dv[i];
        break;
      }
      case OpKind::kMatMul: {
        const Node& na = node(in[0]);
        const Node& nb = node(in[1]);
        CMap A(data(na), na.shape.rows, na.shape.cols);
        CMap B(data(nb), nb.shape.rows, nb.shape.cols);
        CMap G(g, n.shape.rows, n.shape.cols);
        if (wants_grad(in[0])) {
          MMap dA(adj(in[0]), na.shape.rows, na.shape.cols);
          dA.noalias() += G * B.transpose();
        }
        if (wants_grad(in[1])) {
          MMap dB(adj(in[1]), nb.shape.rows, nb.shape.cols);
          dB.noalias() += A.transpose() * G;
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        if (!wants_grad(in[0])) break;
        const Node& na = node(in[0]);
        const std::int64_t len = na.shape.size();
        const double w = (n.op == OpKind::kMean) ? g[0] / len : g[0];
        double* a = adj(in[0]);
        for (std::int64_t i = 0; i < len; ++i) a[i] += w;
        break;
      }
      case OpKind::kClampGradPassthrough: {
        if (!wants_grad(in[0])) break;
        double* a = adj(in[0]);
        const std::int64_t len = n.shape.size();
        for (std::int64_t i = 0; i < len; ++i) a[i] += g[i];
        break;
      }
      case OpKind::kConcatCols: {
        int at = 0;
        const int cols = n.shape.cols;
        const int rows = n.shape.rows;
        for (NodeId p : in) {
          const Node& pn = node(p);
          const int pc = pn.shape.cols;
          if (wants_grad(p)) {
            double* a = adj(p);
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < pc; ++j) a[i * pc + j] += g[i * cols + at + j];
          }
          at += pc;
        }
        break;
      }
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<NodeId> leaves_;
  std::vector<double> values_;
  std::vector<double> aux_;
  mutable std::vector<double> adjoint_;
};

// Central-difference check of an analytic gradient. Returns the maximum over
// components of |analytic - central difference| / (|central difference| + 1e-12).
inline double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> analytic_grad,
                                std::span<const double> at, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be > 0");
  if (analytic_grad.size() != at.size())
    throw std::invalid_argument("finite_diff_check: gradient/point size mismatch");
  std::vector<double> x(at.begin(), at.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    double fp = f(x);
    x[i] = xi - h;
    double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_check: non-finite function value");
    double fd = (fp - fm) / (2.0 * h);
    double rel = std::abs(analytic_grad[i] - fd) / (std::abs(fd) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace ivol::ad
