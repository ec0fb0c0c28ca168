#pragma once

// Dense row-major tensors and a reverse-mode gradient tape.
//
// A Tape owns every value produced while it is recording. Operations take
// Var handles, append one node holding the forward value and a backward
// closure, and return a handle to it. Nodes are appended in topological
// order, so backward() is a single reverse sweep. Gradients accumulate
// additively into lazily allocated buffers and only exist for nodes that
// depend on a leaf.
//
// Image-like tensors use (channels, height, width) layout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gnnet/error.hpp"

namespace gnnet::tensor {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<double> data() { return data_; }
  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] double* ptr() { return data_.data(); }
  [[nodiscard]] const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element of a (C, H, W) tensor.
  [[nodiscard]] double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  [[nodiscard]] double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item on shape " + to_string(shape_));
    return data_[0];
  }

  [[nodiscard]] Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input (network parameter, coordinates under test, ...).
  Var leaf(Tensor value) { return push(std::move(value), true, nullptr); }

  /// An input that receives no gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape() != this) throw Error("tape: operand recorded on a different tape");
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialized on first use.
  Tensor& accumulate(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  [[nodiscard]] const Tensor* grad_if(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.has_grad ? &n.grad : nullptr;
  }

  /// d(loss)/d(v). Zero when no gradient reached v.
  [[nodiscard]] Tensor grad(Var v) const {
    const Tensor* g = grad_if(v.id());
    return g ? *g : Tensor(v.shape(), 0.0);
  }

  void backward(Var loss) {
    if (loss.tape() != this) throw Error("backward: loss belongs to a different tape");
    if (loss.value().size() != 1 || loss.value().rank() != 0) {
      throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    accumulate(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, false, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: references stay valid while recording
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("Var: empty handle");
  return tape_->value(id_);
}

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

/// Elementwise map with derivative dy/dx = df(x, y).
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, df](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

/// Bilinear blend of the 2x2 cell whose top-left sample is p[0].
inline double bilinear_blend(const double* p, std::size_t row_stride, double fx, double fy) {
  return (1 - fx) * (1 - fy) * p[0] + fx * (1 - fy) * p[1] + (1 - fx) * fy * p[row_stride] +
         fx * fy * p[row_stride + 1];
}

/// Splits a coordinate into (cell index, fraction) for bilinear lookup on
/// [0, extent-1]. The last sample point uses the last cell with fraction 1.
inline std::pair<std::size_t, double> bilinear_cell(double x, std::size_t extent) {
  double fl = std::floor(x);
  if (fl >= static_cast<double>(extent - 1)) fl = static_cast<double>(extent - 2);
  return {static_cast<std::size_t>(fl), x - fl};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gx = t.accumulate(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.accumulate(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulate(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a, b);
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(y), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.accumulate(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulate(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exponential linear unit with alpha = 1 (continuously differentiable).
inline Var elu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

inline Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive argument");
  }
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Square root; the derivative at 0 is taken as 0.
inline Var sqrt(Var a) {
  for (double x : a.value().data()) {
    if (x < 0.0) throw DomainError("sqrt: negative argument");
  }
  return detail::unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var reciprocal(Var a) {
  for (double x : a.value().data()) {
    if (x == 0.0) throw DomainError("reciprocal: zero argument");
  }
  return detail::unary(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions
// ---------------------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Sum of all elements, as a rank-0 tensor.
inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = (*t.grad_if(self))[0];
    Tensor& ga = t.accumulate(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

/// Sum over the trailing axis: (..., n) -> (...).
inline Var sum_last(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw ShapeError("sum_last: scalar input");
  const std::size_t n = x.shape().back();
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor y(out_shape);
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += x[o * n + k];
    y[o] = s;
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, n](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t o = 0; o < g.size(); ++o) {
      for (std::size_t k = 0; k < n; ++k) ga[o * n + k] += g[o];
    }
  });
}

namespace detail {
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

/// Concatenates along `axis`; every other extent must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(s0) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const auto out_split = detail::split_at(out_shape, axis);
  Tensor y(out_shape);
  std::vector<std::size_t> ids, offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto sp = detail::split_at(p.shape(), axis);
    const Tensor& x = p.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = x.ptr() + o * sp.extent * sp.inner;
      double* dst = y.ptr() + (o * out_split.extent + offset) * sp.inner;
      std::copy(src, src + sp.extent * sp.inner, dst);
    }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += sp.extent;
  }
  Tape* tape = parts[0].tape();
  return tape->record(std::move(y), parts,
                      [ids, offsets, axis, out_split](Tape& t, std::size_t self) {
                        const Tensor& g = *t.grad_if(self);
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          if (!t.requires_grad(ids[k])) continue;
                          Tensor& gx = t.accumulate(ids[k]);
                          const auto sp = detail::split_at(gx.shape(), axis);
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            const double* src =
                                g.ptr() + (o * out_split.extent + offsets[k]) * sp.inner;
                            double* dst = gx.ptr() + o * sp.extent * sp.inner;
                            for (std::size_t i = 0; i < sp.extent * sp.inner; ++i) dst[i] += src[i];
                          }
                        }
                      });
}

inline Var concat_channels(const std::vector<Var>& parts) { return concat(parts, 0); }

/// Elements [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const auto sp = detail::split_at(s, axis);
  const std::size_t len = end - begin;
  Tensor y(out_shape);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = x.ptr() + (o * sp.extent + begin) * sp.inner;
    std::copy(src, src + len * sp.inner, y.ptr() + o * len * sp.inner);
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, sp, begin, len](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = g.ptr() + o * len * sp.inner;
      double* dst = ga.ptr() + (o * sp.extent + begin) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {
// c[m,n] += a[m,k] * b[k,n] with optional transposes on the stored operands.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n, bool ta, bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      if (!tb) {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}
}  // namespace detail

/// (m, k) x (k, n) -> (m, n).
inline Var matmul(Var a, Var b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Tensor y({m, n});
  detail::gemm_acc(a.value().ptr(), b.value().ptr(), y.ptr(), m, k, n, false, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(y), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    if (t.requires_grad(ia)) {  // dA = G B^T
      detail::gemm_acc(g.ptr(), t.value(ib).ptr(), t.accumulate(ia).ptr(), m, n, k, false, true);
    }
    if (t.requires_grad(ib)) {  // dB = A^T G
      detail::gemm_acc(t.value(ia).ptr(), g.ptr(), t.accumulate(ib).ptr(), k, m, n, true, false);
    }
  });
}

/// Batched product (B, m, k) x (B, k, n) -> (B, m, n).
inline Var bmm(Var a, Var b) {
  detail::require_rank("bmm", a, 3);
  detail::require_rank("bmm", b, 3);
  const std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  if (b.shape()[0] != B || b.shape()[1] != k) {
    throw ShapeError("bmm: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor y({B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    detail::gemm_acc(a.value().ptr() + i * m * k, b.value().ptr() + i * k * n,
                     y.ptr() + i * m * n, m, k, n, false, false);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(y), {a, b}, [ia, ib, B, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.accumulate(ia);
      for (std::size_t i = 0; i < B; ++i) {
        detail::gemm_acc(g.ptr() + i * m * n, t.value(ib).ptr() + i * k * n, ga.ptr() + i * m * k,
                         m, n, k, false, true);
      }
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulate(ib);
      for (std::size_t i = 0; i < B; ++i) {
        detail::gemm_acc(t.value(ia).ptr() + i * m * k, g.ptr() + i * m * n, gb.ptr() + i * k * n,
                         k, m, n, true, false);
      }
    }
  });
}

/// Swaps the two trailing axes of a rank-2 or rank-3 tensor.
inline Var transpose_last2(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose_last2: rank must be 2 or 3");
  const std::size_t B = s.size() == 3 ? s[0] : 1;
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor y(out_shape);
  const Tensor& x = a.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, B, m, n](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Batched 2x2 algebra
// ---------------------------------------------------------------------------

namespace detail {
inline void require_batch_2x2(const char* op, const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 3 || s[1] != 2 || s[2] != 2) {
    throw ShapeError(std::string(op) + ": expected (N,2,2), got " + to_string(s));
  }
}
}  // namespace detail

/// Determinants of a batch (N, 2, 2) -> (N).
inline Var det2x2(Var a) {
  detail::require_batch_2x2("det2x2", a);
  const std::size_t N = a.shape()[0];
  const Tensor& x = a.value();
  Tensor y({N});
  for (std::size_t i = 0; i < N; ++i) {
    const double* m = x.ptr() + 4 * i;
    y[i] = m[0] * m[3] - m[1] * m[2];
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, N](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t i = 0; i < N; ++i) {
      const double* m = x.ptr() + 4 * i;
      double* d = ga.ptr() + 4 * i;
      d[0] += g[i] * m[3];
      d[1] -= g[i] * m[2];
      d[2] -= g[i] * m[1];
      d[3] += g[i] * m[0];
    }
  });
}

/// Closed-form inverses of a batch (N, 2, 2).
inline Var inv2x2(Var a) {
  detail::require_batch_2x2("inv2x2", a);
  const std::size_t N = a.shape()[0];
  const Tensor& x = a.value();
  Tensor y({N, 2, 2});
  for (std::size_t i = 0; i < N; ++i) {
    const double* m = x.ptr() + 4 * i;
    const double det = m[0] * m[3] - m[1] * m[2];
    if (!(std::abs(det) >= 1e-300)) throw DomainError("inv2x2: singular matrix");
    double* o = y.ptr() + 4 * i;
    o[0] = m[3] / det;
    o[1] = -m[1] / det;
    o[2] = -m[2] / det;
    o[3] = m[0] / det;
  }
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, N](Tape& t, std::size_t self) {
    // d(A^-1) = -A^-1 dA A^-1  =>  dL/dA = -Y^T G Y^T
    const Tensor& g = *t.grad_if(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.accumulate(ia);
    for (std::size_t i = 0; i < N; ++i) {
      const double* Y = y.ptr() + 4 * i;
      const double* G = g.ptr() + 4 * i;
      // T = Y^T G
      const double t00 = Y[0] * G[0] + Y[2] * G[2];
      const double t01 = Y[0] * G[1] + Y[2] * G[3];
      const double t10 = Y[1] * G[0] + Y[3] * G[2];
      const double t11 = Y[1] * G[1] + Y[3] * G[3];
      double* d = ga.ptr() + 4 * i;
      d[0] -= t00 * Y[0] + t01 * Y[1];
      d[1] -= t00 * Y[2] + t01 * Y[3];
      d[2] -= t10 * Y[0] + t11 * Y[1];
      d[3] -= t10 * Y[2] + t11 * Y[3];
    }
  });
}

// ---------------------------------------------------------------------------
// Image operations, (C, H, W) layout
// ---------------------------------------------------------------------------

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {
// Output indices o in [0, out) with 0 <= o*stride + k - pad < in.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::size_t in, std::size_t out,
                                                             std::size_t k, std::size_t stride,
                                                             std::size_t pad) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi_num = static_cast<std::ptrdiff_t>(in) - 1 - off;
  std::ptrdiff_t hi = hi_num < 0 ? -1 : hi_num / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out) - 1);
  return {lo, hi};
}
}  // namespace detail

/// x (Cin, H, W), weight (Cout, Cin, k, k), bias (Cout) -> (Cout, Ho, Wo).
inline Var conv2d(Var x, Var weight, Var bias, ConvOptions opt = {}) {
  detail::require_rank("conv2d input", x, 3);
  detail::require_rank("conv2d weight", weight, 4);
  detail::require_rank("conv2d bias", bias, 1);
  const std::size_t cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t cout = weight.shape()[0], k = weight.shape()[2];
  if (weight.shape()[1] != cin || weight.shape()[3] != k || bias.shape()[0] != cout ||
      opt.stride == 0 || H + 2 * opt.pad < k || W + 2 * opt.pad < k) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " weight " +
                     to_string(weight.shape()) + " bias " + to_string(bias.shape()));
  }
  const std::size_t s = opt.stride, p = opt.pad;
  const std::size_t Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;

  const double* in = x.value().ptr();
  const double* w = weight.value().ptr();
  Tensor y({cout, Ho, Wo});
  for (std::size_t co = 0; co < cout; ++co) {
    double* out = y.ptr() + co * Ho * Wo;
    std::fill(out, out + Ho * Wo, bias.value()[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = in + ci * H * W;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [oy0, oy1] = detail::valid_range(H, Ho, ky, s, p);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto [ox0, ox1] = detail::valid_range(W, Wo, kx, s, p);
          const double wv = w[((co * cin + ci) * k + ky) * k + kx];
          for (std::ptrdiff_t oy = oy0; oy <= oy1; ++oy) {
            const double* row = src + (oy * s + ky - p) * W;
            double* orow = out + oy * Wo;
            if (s == 1) {
              const double* r = row + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p));
              for (std::ptrdiff_t ox = ox0; ox <= ox1; ++ox) orow[ox] += wv * r[ox];
            } else {
              for (std::ptrdiff_t ox = ox0; ox <= ox1; ++ox) orow[ox] += wv * row[ox * s + kx - p];
            }
          }
        }
      }
    }
  }

  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape()->record(
      std::move(y), {x, weight, bias},
      [=](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if(self);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        if (t.requires_grad(ib)) {
          Tensor& gb = t.accumulate(ib);
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            const double* go = g.ptr() + co * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) acc += go[i];
            gb[co] += acc;
          }
        }
        if (!need_x && !need_w) return;
        const double* in = t.value(ix).ptr();
        const double* w = t.value(iw).ptr();
        double* gin = need_x ? t.accumulate(ix).ptr() : nullptr;
        double* gw = need_w ? t.accumulate(iw).ptr() : nullptr;
        for (std::size_t co = 0; co < cout; ++co) {
          const double* go = g.ptr() + co * Ho * Wo;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* src = in + ci * H * W;
            double* gsrc = gin ? gin + ci * H * W : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto [oy0, oy1] = detail::valid_range(H, Ho, ky, s, p);
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto [ox0, ox1] = detail::valid_range(W, Wo, kx, s, p);
                const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                const double wv = w[widx];
                double acc = 0.0;
                for (std::ptrdiff_t oy = oy0; oy <= oy1; ++oy) {
                  const std::size_t roff = (oy * s + ky - p) * W;
                  const double* grow = go + oy * Wo;
                  if (s == 1) {
                    const double* r = src + roff + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p));
                    if (gsrc) {
                      double* gr = gsrc + roff + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p));
                      for (std::ptrdiff_t ox = ox0; ox <= ox1; ++ox) gr[ox] += wv * grow[ox];
                    }
                    if (gw) {
                      for (std::ptrdiff_t ox = ox0; ox <= ox1; ++ox) acc += grow[ox] * r[ox];
                    }
                  } else {
                    for (std::ptrdiff_t ox = ox0; ox <= ox1; ++ox) {
                      const std::size_t idx = roff + ox * s + kx - p;
                      if (gsrc) gsrc[idx] += wv * grow[ox];
                      acc += grow[ox] * src[idx];
                    }
                  }
                }
                if (gw) gw[widx] += acc;
              }
            }
          }
        }
      });
}

/// Adjoint of a strided convolution. x (Cin, H, W), weight (Cin, Cout, k, k),
/// bias (Cout) -> (Cout, (H-1)*stride - 2*pad + k, ...).
inline Var transposed_conv2d(Var x, Var weight, Var bias, ConvOptions opt = {}) {
  detail::require_rank("transposed_conv2d input", x, 3);
  detail::require_rank("transposed_conv2d weight", weight, 4);
  detail::require_rank("transposed_conv2d bias", bias, 1);
  const std::size_t cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t cout = weight.shape()[1], k = weight.shape()[2];
  const std::size_t s = opt.stride, p = opt.pad;
  if (weight.shape()[0] != cin || weight.shape()[3] != k || bias.shape()[0] != cout || s == 0 ||
      (H - 1) * s + k < 2 * p + 1 || (W - 1) * s + k < 2 * p + 1) {
    throw ShapeError("transposed_conv2d: input " + to_string(x.shape()) + " weight " +
                     to_string(weight.shape()) + " bias " + to_string(bias.shape()));
  }
  const std::size_t Ho = (H - 1) * s + k - 2 * p, Wo = (W - 1) * s + k - 2 * p;

  // Output pixel of input (iy, ky) is iy*s + ky - p: the same index map as a
  // forward convolution whose roles of input/output are swapped.
  Tensor y({cout, Ho, Wo});
  const double* in = x.value().ptr();
  const double* w = weight.value().ptr();
  for (std::size_t co = 0; co < cout; ++co) {
    double* out = y.ptr() + co * Ho * Wo;
    std::fill(out, out + Ho * Wo, bias.value()[co]);
  }
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const double* src = in + ci * H * W;
    for (std::size_t co = 0; co < cout; ++co) {
      double* out = y.ptr() + co * Ho * Wo;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [iy0, iy1] = detail::valid_range(Ho, H, ky, s, p);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto [ix0, ix1] = detail::valid_range(Wo, W, kx, s, p);
          const double wv = w[((ci * cout + co) * k + ky) * k + kx];
          for (std::ptrdiff_t iy = iy0; iy <= iy1; ++iy) {
            double* orow = out + (iy * s + ky - p) * Wo;
            const double* irow = src + iy * W;
            for (std::ptrdiff_t ixx = ix0; ixx <= ix1; ++ixx) orow[ixx * s + kx - p] += wv * irow[ixx];
          }
        }
      }
    }
  }

  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape()->record(std::move(y), {x, weight, bias}, [=](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.accumulate(ib);
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (std::size_t i = 0; i < Ho * Wo; ++i) acc += g[co * Ho * Wo + i];
        gb[co] += acc;
      }
    }
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
    if (!need_x && !need_w) return;
    const double* in = t.value(ix).ptr();
    const double* w = t.value(iw).ptr();
    double* gin = need_x ? t.accumulate(ix).ptr() : nullptr;
    double* gw = need_w ? t.accumulate(iw).ptr() : nullptr;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t co = 0; co < cout; ++co) {
        const double* go = g.ptr() + co * Ho * Wo;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [iy0, iy1] = detail::valid_range(Ho, H, ky, s, p);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto [ix0, ix1] = detail::valid_range(Wo, W, kx, s, p);
            const std::size_t widx = ((ci * cout + co) * k + ky) * k + kx;
            const double wv = w[widx];
            double acc = 0.0;
            for (std::ptrdiff_t iy = iy0; iy <= iy1; ++iy) {
              const double* grow = go + (iy * s + ky - p) * Wo;
              const std::size_t ioff = ci * H * W + iy * W;
              for (std::ptrdiff_t ixx = ix0; ixx <= ix1; ++ixx) {
                const double gv = grow[ixx * s + kx - p];
                if (gin) gin[ioff + ixx] += wv * gv;
                acc += gv * in[ioff + ixx];
              }
            }
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
  });
}

/// 2x2 mean pooling with stride 2. Spatial extents must be even.
inline Var avg_pool2(Var x) {
  detail::require_rank("avg_pool2", x, 3);
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size " + to_string(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor y({C, Ho, Wo});
  const Tensor& v = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        y.at(c, i, j) = 0.25 * (v.at(c, 2 * i, 2 * j) + v.at(c, 2 * i, 2 * j + 1) +
                                v.at(c, 2 * i + 1, 2 * j) + v.at(c, 2 * i + 1, 2 * j + 1));
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& gx = t.accumulate(ix);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const double q = 0.25 * g.at(c, i, j);
          gx.at(c, 2 * i, 2 * j) += q;
          gx.at(c, 2 * i, 2 * j + 1) += q;
          gx.at(c, 2 * i + 1, 2 * j) += q;
          gx.at(c, 2 * i + 1, 2 * j + 1) += q;
        }
  });
}

inline Var upsample2_nearest(Var x) {
  detail::require_rank("upsample2_nearest", x, 3);
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor y({C, 2 * H, 2 * W});
  const Tensor& v = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j) y.at(c, i, j) = v.at(c, i / 2, j / 2);
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(y), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    Tensor& gx = t.accumulate(ix);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j) gx.at(c, i / 2, j / 2) += g.at(c, i, j);
  });
}

/// Bilinear lookup of every channel of `map` (C, H, W) at positions `grid`
/// (N, 2) holding (x, y) pixel coordinates; returns (N, C). Positions must lie
/// in [0, W-1] x [0, H-1]. Gradients flow to the map and to the positions.
inline Var bilinear_sample(Var map, Var grid) {
  detail::require_rank("bilinear_sample map", map, 3);
  detail::require_rank("bilinear_sample grid", grid, 2);
  const std::size_t C = map.shape()[0], H = map.shape()[1], W = map.shape()[2];
  const std::size_t N = grid.shape()[0];
  if (grid.shape()[1] != 2 || H < 2 || W < 2) {
    throw ShapeError("bilinear_sample: map " + to_string(map.shape()) + " grid " +
                     to_string(grid.shape()));
  }
  const Tensor& m = map.value();
  const Tensor& gr = grid.value();
  Tensor y({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    const double x = gr[2 * n], yy = gr[2 * n + 1];
    if (!(x >= 0.0 && x <= W - 1.0 && yy >= 0.0 && yy <= H - 1.0)) {
      std::ostringstream os;
      os << "bilinear_sample: position (" << x << ", " << yy << ") outside " << W << "x" << H;
      throw DomainError(os.str());
    }
    const auto [x0, fx] = detail::bilinear_cell(x, W);
    const auto [y0, fy] = detail::bilinear_cell(yy, H);
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = m.ptr() + (c * H + y0) * W + x0;
      y[n * C + c] = detail::bilinear_blend(p, W, fx, fy);
    }
  }
  const std::size_t im = map.id(), ig = grid.id();
  return map.tape()->record(std::move(y), {map, grid}, [=](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if(self);
    const Tensor& m = t.value(im);
    const Tensor& gr = t.value(ig);
    double* gm = t.requires_grad(im) ? t.accumulate(im).ptr() : nullptr;
    double* gg = t.requires_grad(ig) ? t.accumulate(ig).ptr() : nullptr;
    for (std::size_t n = 0; n < N; ++n) {
      const auto [x0, fx] = detail::bilinear_cell(gr[2 * n], W);
      const auto [y0, fy] = detail::bilinear_cell(gr[2 * n + 1], H);
      double dx = 0.0, dy = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double gv = g[n * C + c];
        const std::size_t base = (c * H + y0) * W + x0;
        if (gm) {
          gm[base] += gv * (1 - fx) * (1 - fy);
          gm[base + 1] += gv * fx * (1 - fy);
          gm[base + W] += gv * (1 - fx) * fy;
          gm[base + W + 1] += gv * fx * fy;
        }
        const double* p = m.ptr() + base;
        dx += gv * ((1 - fy) * (p[1] - p[0]) + fy * (p[W + 1] - p[W]));
        dy += gv * ((1 - fx) * (p[W] - p[0]) + fx * (p[W + 1] - p[1]));
      }
      if (gg) {
        gg[2 * n] += dx;
        gg[2 * n + 1] += dy;
      }
    }
  });
}

}  // namespace gnnet::tensor
