#pragma once

// Reverse-mode automatic differentiation on an eager tape.
//
// Every op evaluates immediately and appends a node to its tape. Adjoint
// rules are written in terms of the same ops, so a reverse sweep run with
// `create_graph = true` leaves behind an ordinary differentiable graph
// (tape-on-tape). That is what makes second-order meta-gradients possible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "amc/autodiff/kernels.hpp"
#include "amc/autodiff/tensor.hpp"
#include "amc/error.hpp"

namespace amc::ad {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Affine,
  ScaleBy,
  Sum,
  Broadcast,
  MatMul,
  AddBias,
  BiasGrad,
  ExpandBias,
  Conv1d,
  Conv1dInputGrad,
  Conv1dWeightGrad,
  Relu,
  Tanh,
  Sign,
  Abs,
  Sqrt,
  Recip,
  Clamp,
  Softmax,
  RowSumBroadcast,
  SoftmaxCrossEntropy,
  Pick,
  Scatter,
  MaxAbs,
  Reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Affine: return "affine";
    case Op::ScaleBy: return "scale_by";
    case Op::Sum: return "sum";
    case Op::Broadcast: return "broadcast";
    case Op::MatMul: return "matmul";
    case Op::AddBias: return "add_bias";
    case Op::BiasGrad: return "bias_grad";
    case Op::ExpandBias: return "expand_bias";
    case Op::Conv1d: return "conv1d";
    case Op::Conv1dInputGrad: return "conv1d_input_grad";
    case Op::Conv1dWeightGrad: return "conv1d_weight_grad";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sign: return "sign";
    case Op::Abs: return "abs";
    case Op::Sqrt: return "sqrt";
    case Op::Recip: return "recip";
    case Op::Clamp: return "clamp";
    case Op::Softmax: return "softmax";
    case Op::RowSumBroadcast: return "rowsum_broadcast";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::Pick: return "pick";
    case Op::Scatter: return "scatter";
    case Op::MaxAbs: return "max_abs";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

// Ops whose adjoint is identically zero. A loss that reaches a variable
// only through these has no gradient with respect to it.
inline bool zero_adjoint(Op op) { return op == Op::Sign; }

using Indices = std::shared_ptr<const std::vector<std::size_t>>;

struct Node {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

  Op op = Op::Leaf;
  bool requires_grad = false;
  std::uint32_t parents[2] = {kNone, kNone};
  Tensor value;
  double a = 0.0;
  double b = 0.0;
  int flags = 0;
  Indices index;
  Shape aux_shape;

  std::size_t arity() const {
    return (parents[0] != kNone) + (parents[1] != kNone);
  }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives
/// and has not been truncated below it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  /// `higher_order` permits reverse sweeps that are themselves recorded.
  explicit Tape(bool higher_order = false) : higher_order_(higher_order) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool higher_order() const { return higher_order_; }
  std::size_t size() const { return nodes_.size(); }

  /// Differentiable leaf.
  Var variable(Tensor value) { return leaf(std::move(value), true); }

  /// Non-differentiable leaf. Gradients may still be requested for it; a
  /// constant is simply a leaf that is not marked for training.
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Node& node(std::uint32_t id) const { return nodes_.at(id); }

  Var push(Node n) {
    if (!recording_) {
      n.parents[0] = n.parents[1] = Node::kNone;
      n.requires_grad = false;
    } else {
      n.requires_grad = false;
      for (auto p : n.parents) {
        if (p != Node::kNone && nodes_[p].requires_grad) n.requires_grad = true;
      }
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Drops every node with id >= `size`. Vars pointing there become dangling.
  void truncate(std::size_t size) {
    if (size < nodes_.size()) nodes_.resize(size);
  }

  bool recording() const { return recording_; }

  /// While alive, new nodes are recorded without parents (constants).
  class NoGradGuard {
   public:
    explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.recording_) {
      t.recording_ = false;
    }
    ~NoGradGuard() { tape_.recording_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

 private:
  Var leaf(Tensor value, bool requires_grad) {
    if (!value.all_finite()) throw ValueError("non-finite value bound to graph leaf");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    nodes_.back().requires_grad = requires_grad;
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  bool higher_order_;
  bool recording_ = true;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ValueError("invalid Var");
  if (a.tape() != b.tape()) throw ValueError("vars live on different tapes");
  return *a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

inline Node make(Op op, Tensor value, const Var& p0, const Var* p1 = nullptr) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.parents[0] = p0.id();
  if (p1) n.parents[1] = p1->id();
  return n;
}

template <class F>
Var unary(Op op, const Var& x, F&& f) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return x.tape()->push(make(op, std::move(y), x));
}

template <class F>
Var binary(Op op, const Var& a, const Var& b, F&& f, const char* name) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = f(av[i], bv[i]);
  return t.push(make(op, std::move(y), a, &b));
}

inline void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(x.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  return detail::binary(Op::Add, a, b, [](double x, double y) { return x + y; }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(Op::Sub, a, b, [](double x, double y) { return x - y; }, "sub");
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(Op::Mul, a, b, [](double x, double y) { return x * y; }, "mul");
}

/// scale * x + shift, with constant scalars.
inline Var affine(const Var& x, double scale, double shift = 0.0) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = scale * xv[i] + shift;
  Node n = detail::make(Op::Affine, std::move(y), x);
  n.a = scale;
  n.b = shift;
  return x.tape()->push(std::move(n));
}

inline Var scale(const Var& x, double s) { return affine(x, s, 0.0); }

/// x * s where s is a one-element variable.
inline Var scale_by(const Var& x, const Var& s) {
  Tape& t = detail::same_tape(x, s);
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must have one element");
  const double sv = s.value()[0];
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * sv;
  return t.push(detail::make(Op::ScaleBy, std::move(y), x, &s));
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->push(detail::make(Op::Sum, Tensor::scalar(s), x));
}

/// Fills `shape` with the single element of `s`.
inline Var broadcast(const Var& s, const Shape& shape) {
  if (s.value().size() != 1) throw ShapeError("broadcast: source must have one element");
  Node n = detail::make(Op::Broadcast, Tensor(shape, s.value()[0]), s);
  n.aux_shape = s.shape();
  return s.tape()->push(std::move(n));
}

inline Var reshape(const Var& x, const Shape& shape) {
  Node n = detail::make(Op::Reshape, x.value().reshaped(shape), x);
  n.aux_shape = x.shape();
  return x.tape()->push(std::move(n));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(A) * op(B) where op transposes when the matching flag is set.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  Tape& t = detail::same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + ")");
  }
  Tensor c(Shape{m, n});
  kernels::gemm(trans_a, trans_b, m, n, ka, a.value().data().data(), b.value().data().data(),
                c.data().data());
  Node node = detail::make(Op::MatMul, std::move(c), a, &b);
  node.flags = (trans_a ? 1 : 0) | (trans_b ? 2 : 0);
  return t.push(std::move(node));
}

// Bias helpers treat x as [N, C, inner...] and broadcast along axis 1.
namespace detail {
inline std::pair<std::size_t, std::size_t> bias_dims(const Shape& s) {
  if (s.size() < 2) throw ShapeError("bias op: tensor must have rank >= 2");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], inner};
}
}  // namespace detail

inline Var add_bias(const Var& x, const Var& bias) {
  Tape& t = detail::same_tape(x, bias);
  const auto [outer, inner] = detail::bias_dims(x.shape());
  const std::size_t c = x.shape()[1];
  if (bias.shape() != Shape{c}) {
    throw ShapeError("add_bias: bias shape " + to_string(bias.shape()) +
                     " does not match channels of " + to_string(x.shape()));
  }
  Tensor y = x.value();
  const Tensor& bv = bias.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* row = y.data().data() + (o * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bv[ch];
    }
  }
  return t.push(detail::make(Op::AddBias, std::move(y), x, &bias));
}

/// Sum over every axis except axis 1.
inline Var bias_grad(const Var& g) {
  const auto [outer, inner] = detail::bias_dims(g.shape());
  const std::size_t c = g.shape()[1];
  Tensor r(Shape{c});
  const Tensor& gv = g.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* row = gv.data().data() + (o * c + ch) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += row[i];
      r[ch] += s;
    }
  }
  return g.tape()->push(detail::make(Op::BiasGrad, std::move(r), g));
}

inline Var expand_bias(const Var& bias, const Shape& shape) {
  const auto [outer, inner] = detail::bias_dims(shape);
  const std::size_t c = shape[1];
  if (bias.shape() != Shape{c}) throw ShapeError("expand_bias: channel mismatch");
  Tensor y(shape);
  const Tensor& bv = bias.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* row = y.data().data() + (o * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] = bv[ch];
    }
  }
  Node n = detail::make(Op::ExpandBias, std::move(y), bias);
  n.aux_shape = shape;
  return bias.tape()->push(std::move(n));
}

// ---------------------------------------------------------------------------
// 1-D convolution, stride 1, zero "same" padding with pad = (K-1)/2.
//
// conv1d, conv1d_input_grad and conv1d_weight_grad form a set that is closed
// under taking adjoints; each one's derivative is expressed with the other
// two, so second-order sweeps through conv layers need nothing extra.

inline Var conv1d(const Var& x, const Var& w) {
  Tape& t = detail::same_tape(x, w);
  detail::require_rank(x, 3, "conv1d");
  detail::require_rank(w, 3, "conv1d");
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
  const std::size_t cout = w.shape()[0], kernel = w.shape()[2];
  if (w.shape()[1] != cin) {
    throw ShapeError("conv1d: kernel " + to_string(w.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  Tensor y(Shape{batch, cout, len});
  kernels::conv1d(x.value().data(), w.value().data(), y.data(), batch, cin, cout, len,
                  kernel);
  return t.push(detail::make(Op::Conv1d, std::move(y), x, &w));
}

inline Var conv1d_input_grad(const Var& g, const Var& w) {
  Tape& t = detail::same_tape(g, w);
  detail::require_rank(g, 3, "conv1d_input_grad");
  detail::require_rank(w, 3, "conv1d_input_grad");
  const std::size_t batch = g.shape()[0], cout = g.shape()[1], len = g.shape()[2];
  const std::size_t cin = w.shape()[1], kernel = w.shape()[2];
  if (w.shape()[0] != cout) throw ShapeError("conv1d_input_grad: channel mismatch");
  Tensor z(Shape{batch, cin, len});
  kernels::conv1d_input_grad(g.value().data(), w.value().data(), z.data(), batch, cin,
                             cout, len, kernel);
  return t.push(detail::make(Op::Conv1dInputGrad, std::move(z), g, &w));
}

inline Var conv1d_weight_grad(const Var& x, const Var& g, std::size_t kernel) {
  Tape& t = detail::same_tape(x, g);
  detail::require_rank(x, 3, "conv1d_weight_grad");
  detail::require_rank(g, 3, "conv1d_weight_grad");
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
  const std::size_t cout = g.shape()[1];
  if (g.shape()[0] != batch || g.shape()[2] != len) {
    throw ShapeError("conv1d_weight_grad: batch/length mismatch");
  }
  Tensor dw(Shape{cout, cin, kernel});
  kernels::conv1d_weight_grad(x.value().data(), g.value().data(), dw.data(), batch, cin,
                              cout, len, kernel);
  Node n = detail::make(Op::Conv1dWeightGrad, std::move(dw), x, &g);
  n.flags = static_cast<int>(kernel);
  return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(const Var& x) {
  return detail::unary(Op::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; });
}

inline Var tanh(const Var& x) {
  return detail::unary(Op::Tanh, x, [](double v) { return std::tanh(v); });
}

/// sign(0) == 0. Declares a zero adjoint.
inline Var sign(const Var& x) {
  return detail::unary(Op::Sign, x,
                       [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var abs(const Var& x) {
  return detail::unary(Op::Abs, x, [](double v) { return std::abs(v); });
}

inline Var sqrt(const Var& x) {
  return detail::unary(Op::Sqrt, x, [](double v) { return std::sqrt(v); });
}

inline Var recip(const Var& x) {
  return detail::unary(Op::Recip, x, [](double v) { return 1.0 / v; });
}

inline Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo > hi");
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = std::clamp(xv[i], lo, hi);
  Node n = detail::make(Op::Clamp, std::move(y), x);
  n.a = lo;
  n.b = hi;
  return x.tape()->push(std::move(n));
}

/// Row-wise softmax over a [rows, cols] tensor.
inline Var softmax(const Var& z) {
  detail::require_rank(z, 2, "softmax");
  const std::size_t rows = z.shape()[0], cols = z.shape()[1];
  Tensor y(z.shape());
  const double* zv = z.value().data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double lse = kernels::logsumexp(zv + r * cols, cols);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = std::exp(zv[r * cols + c] - lse);
  }
  return z.tape()->push(detail::make(Op::Softmax, std::move(y), z));
}

/// Replaces each element of a [rows, cols] tensor by its row sum.
inline Var rowsum_broadcast(const Var& z) {
  detail::require_rank(z, 2, "rowsum_broadcast");
  const std::size_t rows = z.shape()[0], cols = z.shape()[1];
  Tensor y(z.shape());
  const Tensor& zv = z.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += zv[r * cols + c];
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = s;
  }
  return z.tape()->push(detail::make(Op::RowSumBroadcast, std::move(y), z));
}

enum class Reduction { Mean, Sum };

/// Fused, log-sum-exp stabilized cross-entropy of [rows, classes] logits.
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels,
                                 Reduction reduction = Reduction::Mean) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy: label count mismatch");
  if (rows == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  const double* zv = logits.value().data().data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw ValueError("softmax_cross_entropy: label out of range");
    total += kernels::logsumexp(zv + r * cols, cols) - zv[r * cols + labels[r]];
  }
  if (reduction == Reduction::Mean) total /= static_cast<double>(rows);
  Node n = detail::make(Op::SoftmaxCrossEntropy, Tensor::scalar(total), logits);
  n.index = std::make_shared<const std::vector<std::size_t>>(labels.begin(), labels.end());
  n.flags = reduction == Reduction::Mean ? 1 : 0;
  return logits.tape()->push(std::move(n));
}

/// out[r] = z[r, idx[r]]
inline Var pick(const Var& z, Indices idx) {
  detail::require_rank(z, 2, "pick");
  const std::size_t rows = z.shape()[0], cols = z.shape()[1];
  if (!idx || idx->size() != rows) throw ShapeError("pick: index count mismatch");
  Tensor y(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if ((*idx)[r] >= cols) throw ValueError("pick: index out of range");
    y[r] = z.value()[r * cols + (*idx)[r]];
  }
  Node n = detail::make(Op::Pick, std::move(y), z);
  n.index = std::move(idx);
  n.aux_shape = z.shape();
  return z.tape()->push(std::move(n));
}

inline Var pick(const Var& z, std::span<const std::size_t> idx) {
  return pick(z, std::make_shared<const std::vector<std::size_t>>(idx.begin(), idx.end()));
}

/// out[r, idx[r]] = v[r], zero elsewhere; the adjoint of pick.
inline Var scatter(const Var& v, Indices idx, std::size_t cols) {
  detail::require_rank(v, 1, "scatter");
  const std::size_t rows = v.shape()[0];
  if (!idx || idx->size() != rows) throw ShapeError("scatter: index count mismatch");
  Tensor y(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) y[r * cols + (*idx)[r]] = v.value()[r];
  Node n = detail::make(Op::Scatter, std::move(y), v);
  n.index = std::move(idx);
  n.aux_shape = Shape{rows, cols};
  return v.tape()->push(std::move(n));
}

/// max_i |x_i| as a scalar.
inline Var max_abs(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.size() == 0) throw ShapeError("max_abs: empty tensor");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xv.size(); ++i) {
    if (std::abs(xv[i]) > std::abs(xv[arg])) arg = i;
  }
  Node n = detail::make(Op::MaxAbs, Tensor::scalar(std::abs(xv[arg])), x);
  n.flags = static_cast<int>(arg);
  return x.tape()->push(std::move(n));
}

/// L_p norm of all elements, p in {1, 2, inf}; built from primitive ops.
inline Var norm_p(const Var& x, double p) {
  if (p == 1.0) return sum(abs(x));
  if (p == 2.0) return sqrt(sum(mul(x, x)));
  if (std::isinf(p)) return max_abs(x);
  throw ValueError("norm_p: p must be 1, 2 or inf");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }
inline Var operator-(const Var& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Reverse sweep

namespace detail {

inline Var mask_constant(Tape& t, const Tensor& x, double (*f)(double)) {
  Tensor m(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = f(x[i]);
  return t.constant(std::move(m));
}

// Adjoints of `self` with respect to its parents, given upstream adjoint g.
// Only parents flagged in `need` are computed.
inline void adjoint(Tape& t, Var self, Var g, const bool need[2], Var out[2]) {
  // Copy the metadata only: pushing new nodes may reallocate the tape.
  struct {
    Op op;
    std::uint32_t parents[2];
    double a, b;
    int flags;
    Indices index;
    Shape aux_shape;
  } n;
  {
    const Node& src = t.node(self.id());
    n.op = src.op;
    n.parents[0] = src.parents[0];
    n.parents[1] = src.parents[1];
    n.a = src.a;
    n.b = src.b;
    n.flags = src.flags;
    n.index = src.index;
    n.aux_shape = src.aux_shape;
  }
  const Var p0 = n.parents[0] != Node::kNone ? Var(&t, n.parents[0]) : Var();
  const Var p1 = n.parents[1] != Node::kNone ? Var(&t, n.parents[1]) : Var();
  switch (n.op) {
    case Op::Leaf:
    case Op::Sign:
      break;
    case Op::Add:
      if (need[0]) out[0] = g;
      if (need[1]) out[1] = g;
      break;
    case Op::Sub:
      if (need[0]) out[0] = g;
      if (need[1]) out[1] = scale(g, -1.0);
      break;
    case Op::Mul:
      if (need[0]) out[0] = mul(g, p1);
      if (need[1]) out[1] = mul(g, p0);
      break;
    case Op::Affine:
      if (need[0]) out[0] = scale(g, n.a);
      break;
    case Op::ScaleBy:
      if (need[0]) out[0] = scale_by(g, p1);
      if (need[1]) out[1] = reshape(sum(mul(g, p0)), p1.shape());
      break;
    case Op::Sum:
      if (need[0]) out[0] = broadcast(g, p0.shape());
      break;
    case Op::Broadcast:
      if (need[0]) out[0] = reshape(sum(g), n.aux_shape);
      break;
    case Op::Reshape:
      if (need[0]) out[0] = reshape(g, n.aux_shape);
      break;
    case Op::MatMul: {
      const bool ta = n.flags & 1, tb = n.flags & 2;
      if (need[0]) out[0] = ta ? matmul(p1, g, tb, true) : matmul(g, p1, false, !tb);
      if (need[1]) out[1] = tb ? matmul(g, p0, true, ta) : matmul(p0, g, !ta, false);
      break;
    }
    case Op::AddBias:
      if (need[0]) out[0] = g;
      if (need[1]) out[1] = bias_grad(g);
      break;
    case Op::BiasGrad:
      if (need[0]) out[0] = expand_bias(g, p0.shape());
      break;
    case Op::ExpandBias:
      if (need[0]) out[0] = bias_grad(g);
      break;
    case Op::Conv1d: {
      const std::size_t kernel = p1.shape()[2];
      if (need[0]) out[0] = conv1d_input_grad(g, p1);
      if (need[1]) out[1] = conv1d_weight_grad(p0, g, kernel);
      break;
    }
    case Op::Conv1dInputGrad: {
      const std::size_t kernel = p1.shape()[2];
      if (need[0]) out[0] = conv1d(g, p1);
      if (need[1]) out[1] = conv1d_weight_grad(g, p0, kernel);
      break;
    }
    case Op::Conv1dWeightGrad:
      if (need[0]) out[0] = conv1d_input_grad(p1, g);
      if (need[1]) out[1] = conv1d(p0, g);
      break;
    case Op::Relu:
      if (need[0]) {
        out[0] = mul(g, mask_constant(t, p0.value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      }
      break;
    case Op::Tanh:
      if (need[0]) out[0] = mul(g, affine(mul(self, self), -1.0, 1.0));
      break;
    case Op::Abs:
      if (need[0]) {
        out[0] = mul(g, mask_constant(t, p0.value(), [](double v) {
                       return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                     }));
      }
      break;
    case Op::Sqrt:
      if (need[0]) out[0] = mul(g, affine(recip(self), 0.5));
      break;
    case Op::Recip:
      if (need[0]) out[0] = mul(g, affine(mul(self, self), -1.0));
      break;
    case Op::Clamp:
      if (need[0]) {
        Tensor m(p0.shape());
        for (std::size_t i = 0; i < m.size(); ++i) {
          const double v = p0.value()[i];
          m[i] = (v > n.a && v < n.b) ? 1.0 : 0.0;
        }
        out[0] = mul(g, t.constant(std::move(m)));
      }
      break;
    case Op::Softmax:
      if (need[0]) out[0] = mul(self, sub(g, rowsum_broadcast(mul(g, self))));
      break;
    case Op::RowSumBroadcast:
      if (need[0]) out[0] = rowsum_broadcast(g);
      break;
    case Op::SoftmaxCrossEntropy:
      if (need[0]) {
        const std::size_t rows = p0.shape()[0], cols = p0.shape()[1];
        Tensor onehot(p0.shape());
        for (std::size_t r = 0; r < rows; ++r) onehot[r * cols + (*n.index)[r]] = 1.0;
        const double factor = n.flags == 1 ? 1.0 / static_cast<double>(rows) : 1.0;
        Var diff = sub(softmax(p0), t.constant(std::move(onehot)));
        out[0] = scale_by(factor == 1.0 ? diff : scale(diff, factor), g);
      }
      break;
    case Op::Pick:
      if (need[0]) out[0] = scatter(g, n.index, n.aux_shape[1]);
      break;
    case Op::Scatter:
      if (need[0]) out[0] = pick(g, n.index);
      break;
    case Op::MaxAbs:
      if (need[0]) {
        Tensor m(p0.shape());
        const double v = p0.value()[static_cast<std::size_t>(n.flags)];
        m[static_cast<std::size_t>(n.flags)] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        out[0] = scale_by(t.constant(std::move(m)), g);
      }
      break;
  }
}

inline void check_wrt(const Var& root, std::span<const Var> wrt) {
  for (const Var& w : wrt) {
    if (!w.valid() || w.tape() != root.tape() || w.id() >= root.tape()->size()) {
      throw ValueError("grad: variable is not registered on this graph");
    }
  }
}

}  // namespace detail

/// Reverse-mode gradients of a scalar `root` with respect to `wrt`.
///
/// With `create_graph` the sweep is recorded, so the returned Vars can be
/// differentiated again; this requires a higher-order tape. Variables that
/// do not influence the root receive zero gradients.
inline std::vector<Var> grad(const Var& root, std::span<const Var> wrt,
                             bool create_graph = false) {
  if (!root.valid()) throw ValueError("grad: invalid root");
  if (root.value().size() != 1) {
    throw ShapeError("grad: root must be scalar, got shape " + to_string(root.shape()));
  }
  Tape& t = *root.tape();
  if (create_graph && !t.higher_order()) {
    throw ValueError("grad: create_graph requires a higher-order tape");
  }
  detail::check_wrt(root, wrt);
  if (!root.value().all_finite()) throw ValueError("grad: non-finite root value");

  const std::uint32_t rid = root.id();
  std::vector<char> dep(rid + 1, 0);
  for (const Var& w : wrt) {
    if (w.id() <= rid) dep[w.id()] = 1;
  }
  for (std::uint32_t i = 0; i <= rid; ++i) {
    if (dep[i]) continue;
    const Node& n = t.node(i);
    for (auto p : n.parents) {
      if (p != Node::kNone && dep[p]) {
        dep[i] = 1;
        break;
      }
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  std::vector<Var> adj(rid + 1);

  std::unique_ptr<Tape::NoGradGuard> guard;
  if (!create_graph) guard = std::make_unique<Tape::NoGradGuard>(t);

  if (dep[rid]) {
    adj[rid] = t.constant(Tensor(root.shape(), 1.0));
    for (std::uint32_t i = rid + 1; i-- > 0;) {
      if (!dep[i] || !adj[i].valid()) continue;
      const Node& n = t.node(i);
      if (n.op == Op::Leaf) continue;
      bool need[2] = {n.parents[0] != Node::kNone && dep[n.parents[0]],
                      n.parents[1] != Node::kNone && dep[n.parents[1]]};
      if (!need[0] && !need[1]) continue;
      const std::uint32_t par[2] = {n.parents[0], n.parents[1]};
      Var out[2];
      detail::adjoint(t, Var(&t, i), adj[i], need, out);
      for (int k = 0; k < 2; ++k) {
        if (!need[k] || !out[k].valid()) continue;
        adj[par[k]] = adj[par[k]].valid() ? add(adj[par[k]], out[k]) : out[k];
      }
    }
  }
  for (const Var& w : wrt) {
    if (w.id() <= rid && adj[w.id()].valid()) {
      result.push_back(adj[w.id()]);
    } else {
      result.push_back(t.constant(Tensor(w.shape(), 0.0)));
    }
  }
  return result;
}

inline std::vector<Var> grad(const Var& root, std::initializer_list<Var> wrt,
                             bool create_graph = false) {
  return grad(root, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

/// First-order gradients as plain tensors. The recorded sweep is discarded
/// afterwards, so the tape returns to its previous size.
inline std::vector<Tensor> gradients(const Var& root, std::span<const Var> wrt) {
  Tape& t = *root.tape();
  const std::size_t mark = t.size();
  std::vector<Tensor> out;
  {
    auto g = grad(root, wrt, false);
    out.reserve(g.size());
    for (const Var& v : g) out.push_back(v.value());
  }
  t.truncate(mark);
  return out;
}

inline std::vector<Tensor> gradients(const Var& root, std::initializer_list<Var> wrt) {
  return gradients(root, std::span<const Var>(wrt.begin(), wrt.size()));
}

namespace detail {

// True when `target` depends on any node in `sources` through a path whose
// ops all have non-zero adjoints.
inline bool differentiably_depends(const Tape& t, std::uint32_t target,
                                   std::span<const Var> sources) {
  std::vector<char> reach(target + 1, 0);
  for (const Var& s : sources) {
    if (s.id() <= target) reach[s.id()] = 1;
  }
  for (std::uint32_t i = 0; i <= target; ++i) {
    if (reach[i]) continue;
    const Node& n = t.node(i);
    if (zero_adjoint(n.op)) continue;
    for (auto p : n.parents) {
      if (p != Node::kNone && reach[p]) {
        reach[i] = 1;
        break;
      }
    }
  }
  return reach[target] != 0;
}

}  // namespace detail

/// Gradient with respect to `outer` of a scalar function `g` of the inner
/// gradient: d/d(outer) g(dL/d(inner)). Used for Hessian-vector products and
/// for differentiating through one SGD step.
template <class G>
std::vector<Tensor> grad2(const Var& root, std::span<const Var> inner,
                          std::span<const Var> outer, G&& g) {
  Tape& t = *root.tape();
  if (!t.higher_order()) throw ValueError("grad2: tape is not higher-order");
  std::vector<Var> inner_grads = grad(root, inner, true);
  Var s = g(std::span<const Var>(inner_grads));
  if (s.value().size() != 1) throw ShapeError("grad2: g must return a scalar");
  if (!detail::differentiably_depends(t, s.id(), inner_grads)) {
    throw ValueError("grad2: non-differentiable path from inner gradient to g");
  }
  return gradients(s, outer);
}

}  // namespace amc::ad
