#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "aov/error.hpp"
#include "aov/rng.hpp"

// Dense row-major tensors with reverse-mode differentiation. The op set is
// exactly what the expert head needs; every op has a hand-written backward
// and is covered by the finite-difference checker below. The numeric mode is
// the template parameter: double for gradient checking, float for training.

namespace aov {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;     // row-major, length == product of extents
  bool requires_grad = false;
  std::vector<Real> grad;     // same length as data once touched by backward
  std::string name;           // diagnostics only

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
  void zero_grad() { grad.assign(data.size(), Real(0)); }
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
TensorPtr<Real> tensor(Shape shape, std::vector<Real> data, bool requires_grad = false,
                       std::string name = "") {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor '" + name + "': data length " + std::to_string(data.size()) +
                     " does not match shape product " + std::to_string(shape_numel(shape)));
  auto t = std::make_shared<Tensor<Real>>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  t->name = std::move(name);
  return t;
}

template <typename Real>
TensorPtr<Real> zeros(Shape shape, bool requires_grad = false, std::string name = "") {
  std::vector<Real> d(shape_numel(shape), Real(0));
  return tensor<Real>(std::move(shape), std::move(d), requires_grad, std::move(name));
}

template <typename Real>
TensorPtr<Real> full(Shape shape, Real value, bool requires_grad = false) {
  std::vector<Real> d(shape_numel(shape), value);
  return tensor<Real>(std::move(shape), std::move(d), requires_grad);
}

template <typename Real>
TensorPtr<Real> scalar(Real value, bool requires_grad = false) {
  return tensor<Real>({1}, {value}, requires_grad);
}

/// Lift an f32 buffer (e.g. bundle features) into the working precision.
template <typename Real>
TensorPtr<Real> from_floats(const float* src, std::size_t n, Shape shape) {
  std::vector<Real> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<Real>(src[i]);
  return tensor<Real>(std::move(shape), std::move(d));
}

template <typename Real>
TensorPtr<Real> randn(Rng& rng, Shape shape, double stddev, bool requires_grad = false,
                      std::string name = "") {
  std::vector<Real> d(shape_numel(shape));
  for (auto& x : d) x = static_cast<Real>(rng.normal(0.0, stddev));
  return tensor<Real>(std::move(shape), std::move(d), requires_grad, std::move(name));
}

/// Fan-in-scaled uniform init: U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
template <typename Real>
TensorPtr<Real> rand_fanin(Rng& rng, Shape shape, std::size_t fan_in, bool requires_grad = false,
                           std::string name = "") {
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<Real> d(shape_numel(shape));
  for (auto& x : d) x = static_cast<Real>(rng.uniform(-bound, bound));
  return tensor<Real>(std::move(shape), std::move(d), requires_grad, std::move(name));
}

namespace detail {

template <typename Real>
void check_finite(const Tensor<Real>& t, const char* op) {
  for (Real v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("non-finite value produced by op '") + op + "'" +
                         (t.name.empty() ? "" : " in tensor '" + t.name + "'"));
  }
}

template <typename Real>
void accumulate(Tensor<Real>& t, std::size_t i, Real v) {
  t.grad[i] += v;
}

}  // namespace detail

/// Execution-ordered op record. Backward walks the record once in reverse;
/// gradient accumulation makes the walk exact for any DAG recorded in
/// execution order.
template <typename Real>
class Tape {
 public:
  using BackFn = std::function<void()>;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when the op that is about to run should record a node.
  template <typename... Parents>
  bool track(const Parents&... parents) const {
    return recording_ && (... || parents->requires_grad);
  }

  void record(TensorPtr<Real> out, BackFn fn) {
    out->requires_grad = true;
    nodes_.push_back({std::move(out), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse pass from a scalar loss. Consumes the recorded nodes: the tape
  /// is empty afterwards and ready for the next step. Gradients accumulate
  /// into every requires_grad tensor reachable from the loss.
  void backward(const TensorPtr<Real>& loss) {
    if (loss->numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss->requires_grad)
      throw UsageError("backward: loss does not depend on any requires_grad tensor");
    loss->ensure_grad();
    loss->grad[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // no gradient flowed into this node
      it->fn();
    }
    nodes_.clear();
  }

 private:
  struct Node {
    TensorPtr<Real> out;
    BackFn fn;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

/// RAII guard for inference passes: recording off within scope.
template <typename Real>
class NoGrad {
 public:
  explicit NoGrad(Tape<Real>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGrad() { tape_.set_recording(prev_); }

 private:
  Tape<Real>& tape_;
  bool prev_;
};

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

inline void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace detail

/// C[n,m] = A[n,k] * B[k,m]
template <typename Real>
TensorPtr<Real> matmul(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape.size() == 2 && b->shape.size() == 2, "matmul", "rank-2 inputs required");
  const std::size_t n = a->shape[0], k = a->shape[1], m = b->shape[1];
  detail::require(b->shape[0] == k, "matmul",
                  "inner extents differ: " + std::to_string(k) + " vs " + std::to_string(b->shape[0]));
  auto out = zeros<Real>({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      Real av = a->data[i * k + p];
      if (av == Real(0)) continue;
      for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] += av * b->data[p * m + j];
    }
  detail::check_finite(*out, "matmul");
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out, n, k, m]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real s = 0;
            for (std::size_t j = 0; j < m; ++j) s += out->grad[i * m + j] * b->data[p * m + j];
            a->grad[i * k + p] += s;
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < m; ++j) {
            Real s = 0;
            for (std::size_t i = 0; i < n; ++i) s += a->data[i * k + p] * out->grad[i * m + j];
            b->grad[p * m + j] += s;
          }
      }
    });
  }
  return out;
}

/// C[n,m] = A[n,k] * B[m,k]^T
template <typename Real>
TensorPtr<Real> matmul_nt(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape.size() == 2 && b->shape.size() == 2, "matmul_nt", "rank-2 inputs required");
  const std::size_t n = a->shape[0], k = a->shape[1], m = b->shape[0];
  detail::require(b->shape[1] == k, "matmul_nt",
                  "inner extents differ: " + std::to_string(k) + " vs " + std::to_string(b->shape[1]));
  auto out = zeros<Real>({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a->data[i * k + p] * b->data[j * k + p];
      out->data[i * m + j] = s;
    }
  detail::check_finite(*out, "matmul_nt");
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out, n, k, m]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real s = 0;
            for (std::size_t j = 0; j < m; ++j) s += out->grad[i * m + j] * b->data[j * k + p];
            a->grad[i * k + p] += s;
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t p = 0; p < k; ++p) {
            Real s = 0;
            for (std::size_t i = 0; i < n; ++i) s += out->grad[i * m + j] * a->data[i * k + p];
            b->grad[j * k + p] += s;
          }
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> add(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape == b->shape, "add", "shapes differ");
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  detail::check_finite(*out, "add");
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> sub(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape == b->shape, "sub", "shapes differ");
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
  detail::check_finite(*out, "sub");
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] -= out->grad[i];
      }
    });
  }
  return out;
}

/// Elementwise (Hadamard) product.
template <typename Real>
TensorPtr<Real> mul(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape == b->shape, "mul", "shapes differ");
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  detail::check_finite(*out, "mul");
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> scale(Tape<Real>& tape, const TensorPtr<Real>& a, Real c) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
  detail::check_finite(*out, "scale");
  if (tape.track(a)) {
    tape.record(out, [a, out, c]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> add_const(Tape<Real>& tape, const TensorPtr<Real>& a, Real c) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + c;
  detail::check_finite(*out, "add_const");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

/// Broadcast a row vector over the rows of a matrix.
template <typename Real>
TensorPtr<Real> add_rowvec(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& v) {
  detail::require(a->shape.size() == 2 && v->shape.size() == 1, "add_rowvec",
                  "matrix and vector required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  detail::require(v->shape[0] == m, "add_rowvec", "vector length does not match columns");
  auto out = zeros<Real>({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] = a->data[i * m + j] + v->data[j];
  detail::check_finite(*out, "add_rowvec");
  if (tape.track(a, v)) {
    tape.record(out, [a, v, out, n, m]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n * m; ++i) a->grad[i] += out->grad[i];
      }
      if (v->requires_grad) {
        v->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) v->grad[j] += out->grad[i * m + j];
      }
    });
  }
  return out;
}

/// Scale row i of a matrix by s[i] (the map weight broadcast over channels).
template <typename Real>
TensorPtr<Real> row_scale(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& s) {
  detail::require(a->shape.size() == 2 && s->shape.size() == 1, "row_scale",
                  "matrix and vector required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  detail::require(s->shape[0] == n, "row_scale", "vector length does not match rows");
  auto out = zeros<Real>({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] = a->data[i * m + j] * s->data[i];
  detail::check_finite(*out, "row_scale");
  if (tape.track(a, s)) {
    tape.record(out, [a, s, out, n, m]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) a->grad[i * m + j] += out->grad[i * m + j] * s->data[i];
      }
      if (s->requires_grad) {
        s->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          Real acc = 0;
          for (std::size_t j = 0; j < m; ++j) acc += out->grad[i * m + j] * a->data[i * m + j];
          s->grad[i] += acc;
        }
      }
    });
  }
  return out;
}

/// Concatenate rank-1 tensors.
template <typename Real>
TensorPtr<Real> concat(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape.size() == 1 && b->shape.size() == 1, "concat", "rank-1 inputs required");
  const std::size_t p = a->shape[0], q = b->shape[0];
  auto out = zeros<Real>({p + q});
  std::copy(a->data.begin(), a->data.end(), out->data.begin());
  std::copy(b->data.begin(), b->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(p));
  if (tape.track(a, b)) {
    tape.record(out, [a, b, out, p, q]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < p; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < q; ++i) b->grad[i] += out->grad[p + i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> concat_many(Tape<Real>& tape, const std::vector<TensorPtr<Real>>& parts) {
  detail::require(!parts.empty(), "concat_many", "empty input list");
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::require(t->shape.size() == 1, "concat_many", "rank-1 inputs required");
    total += t->shape[0];
  }
  auto out = zeros<Real>({total});
  std::size_t off = 0;
  bool any_grad = false;
  for (const auto& t : parts) {
    std::copy(t->data.begin(), t->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
    off += t->shape[0];
    any_grad = any_grad || t->requires_grad;
  }
  if (tape.recording() && any_grad) {
    tape.record(out, [parts, out]() {
      std::size_t off = 0;
      for (const auto& t : parts) {
        if (t->requires_grad) {
          t->ensure_grad();
          for (std::size_t i = 0; i < t->shape[0]; ++i) t->grad[i] += out->grad[off + i];
        }
        off += t->shape[0];
      }
    });
  }
  return out;
}

/// Stack matrices with equal column counts on top of each other.
template <typename Real>
TensorPtr<Real> concat_rows(Tape<Real>& tape, const std::vector<TensorPtr<Real>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "empty input list");
  const std::size_t m = parts[0]->cols();
  std::size_t total = 0;
  bool any_grad = false;
  for (const auto& t : parts) {
    detail::require(t->shape.size() == 2 && t->shape[1] == m, "concat_rows",
                    "column counts differ");
    total += t->shape[0];
    any_grad = any_grad || t->requires_grad;
  }
  auto out = zeros<Real>({total, m});
  std::size_t off = 0;
  for (const auto& t : parts) {
    std::copy(t->data.begin(), t->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
    off += t->numel();
  }
  if (tape.recording() && any_grad) {
    tape.record(out, [parts, out]() {
      std::size_t off = 0;
      for (const auto& t : parts) {
        if (t->requires_grad) {
          t->ensure_grad();
          for (std::size_t i = 0; i < t->numel(); ++i) t->grad[i] += out->grad[off + i];
        }
        off += t->numel();
      }
    });
  }
  return out;
}

/// Concatenate matrices with equal row counts side by side.
template <typename Real>
TensorPtr<Real> concat_cols(Tape<Real>& tape, const std::vector<TensorPtr<Real>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "empty input list");
  const std::size_t n = parts[0]->rows();
  std::size_t total = 0;
  bool any_grad = false;
  for (const auto& t : parts) {
    detail::require(t->shape.size() == 2 && t->shape[0] == n, "concat_cols", "row counts differ");
    total += t->shape[1];
    any_grad = any_grad || t->requires_grad;
  }
  auto out = zeros<Real>({n, total});
  std::size_t off = 0;
  for (const auto& t : parts) {
    const std::size_t m = t->shape[1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out->data[i * total + off + j] = t->data[i * m + j];
    off += m;
  }
  if (tape.recording() && any_grad) {
    tape.record(out, [parts, out, n, total]() {
      std::size_t off = 0;
      for (const auto& t : parts) {
        const std::size_t m = t->shape[1];
        if (t->requires_grad) {
          t->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) t->grad[i * m + j] += out->grad[i * total + off + j];
        }
        off += m;
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> slice_cols(Tape<Real>& tape, const TensorPtr<Real>& a, std::size_t c0,
                           std::size_t c1) {
  detail::require(a->shape.size() == 2, "slice_cols", "rank-2 input required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  detail::require(c0 < c1 && c1 <= m, "slice_cols", "bad column range");
  const std::size_t w = c1 - c0;
  auto out = zeros<Real>({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out->data[i * w + j] = a->data[i * m + c0 + j];
  if (tape.track(a)) {
    tape.record(out, [a, out, n, m, c0, w]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) a->grad[i * m + c0 + j] += out->grad[i * w + j];
    });
  }
  return out;
}

/// Copy with a new shape of equal element count.
template <typename Real>
TensorPtr<Real> reshape(Tape<Real>& tape, const TensorPtr<Real>& a, Shape shape) {
  detail::require(shape_numel(shape) == a->numel(), "reshape", "element counts differ");
  auto out = tensor<Real>(std::move(shape), a->data);
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

/// Mean over axis 0: [n,m] -> [m].
template <typename Real>
TensorPtr<Real> mean_rows(Tape<Real>& tape, const TensorPtr<Real>& a) {
  detail::require(a->shape.size() == 2, "mean_rows", "rank-2 input required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  auto out = zeros<Real>({m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out->data[j] += a->data[i * m + j];
  const Real inv = Real(1) / static_cast<Real>(n);
  for (std::size_t j = 0; j < m; ++j) out->data[j] *= inv;
  detail::check_finite(*out, "mean_rows");
  if (tape.track(a)) {
    tape.record(out, [a, out, n, m, inv]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) a->grad[i * m + j] += out->grad[j] * inv;
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> sum_all(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>({1});
  Real s = 0;
  for (Real v : a->data) s += v;
  out->data[0] = s;
  detail::check_finite(*out, "sum_all");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> mean_all(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto s = sum_all(tape, a);
  return scale(tape, s, Real(1) / static_cast<Real>(a->numel()));
}

/// y = x W + b. The linear building block used along both token and channel
/// dimensions; differentiable w.r.t. all three inputs.
template <typename Real>
TensorPtr<Real> linear(Tape<Real>& tape, const TensorPtr<Real>& x, const TensorPtr<Real>& w,
                       const TensorPtr<Real>& b) {
  return add_rowvec(tape, matmul(tape, x, w), b);
}

template <typename Real>
TensorPtr<Real> relu(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i)
    out->data[i] = a->data[i] > Real(0) ? a->data[i] : Real(0);
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i)
        if (a->data[i] > Real(0)) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> sigmoid(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) {
    Real x = a->data[i];
    if (x >= Real(0)) {
      Real e = std::exp(-x);
      out->data[i] = Real(1) / (Real(1) + e);
    } else {
      Real e = std::exp(x);
      out->data[i] = e / (Real(1) + e);
    }
  }
  detail::check_finite(*out, "sigmoid");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) {
        Real y = out->data[i];
        a->grad[i] += out->grad[i] * y * (Real(1) - y);
      }
    });
  }
  return out;
}

/// Derivative is 1 strictly inside (lo, hi) and 0 outside.
template <typename Real>
TensorPtr<Real> clamp(Tape<Real>& tape, const TensorPtr<Real>& a, Real lo, Real hi) {
  detail::require(lo < hi, "clamp", "lo must be below hi");
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i)
    out->data[i] = std::min(hi, std::max(lo, a->data[i]));
  if (tape.track(a)) {
    tape.record(out, [a, out, lo, hi]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i)
        if (a->data[i] > lo && a->data[i] < hi) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> vlog(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) {
    if (a->data[i] <= Real(0)) throw NumericError("log: non-positive input");
    out->data[i] = std::log(a->data[i]);
  }
  detail::check_finite(*out, "log");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] / a->data[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> vexp(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::exp(a->data[i]);
  detail::check_finite(*out, "exp");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * out->data[i];
    });
  }
  return out;
}

/// Elementwise reciprocal. Zero input is a numeric error.
template <typename Real>
TensorPtr<Real> recip(Tape<Real>& tape, const TensorPtr<Real>& a) {
  auto out = zeros<Real>(a->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) {
    if (a->data[i] == Real(0)) throw NumericError("recip: zero input");
    out->data[i] = Real(1) / a->data[i];
  }
  detail::check_finite(*out, "recip");
  if (tape.track(a)) {
    tape.record(out, [a, out]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->numel(); ++i)
        a->grad[i] -= out->grad[i] * out->data[i] * out->data[i];
    });
  }
  return out;
}

/// Broadcast multiply by a scalar node.
template <typename Real>
TensorPtr<Real> mul_scalar(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& s) {
  detail::require(s->numel() == 1, "mul_scalar", "scalar multiplier required");
  auto out = zeros<Real>(a->shape);
  const Real c = s->data[0];
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
  detail::check_finite(*out, "mul_scalar");
  if (tape.track(a, s)) {
    tape.record(out, [a, s, out]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * s->data[0];
      }
      if (s->requires_grad) {
        s->ensure_grad();
        Real acc = 0;
        for (std::size_t i = 0; i < out->numel(); ++i) acc += out->grad[i] * a->data[i];
        s->grad[0] += acc;
      }
    });
  }
  return out;
}

/// Row-wise softmax with max-subtraction, used by the attention block.
template <typename Real>
TensorPtr<Real> softmax_rows(Tape<Real>& tape, const TensorPtr<Real>& a) {
  detail::require(a->shape.size() == 2, "softmax_rows", "rank-2 input required");
  const std::size_t n = a->shape[0], m = a->shape[1];
  auto out = zeros<Real>({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    Real mx = a->data[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a->data[i * m + j]);
    Real z = 0;
    for (std::size_t j = 0; j < m; ++j) {
      Real e = std::exp(a->data[i * m + j] - mx);
      out->data[i * m + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < m; ++j) out->data[i * m + j] /= z;
  }
  detail::check_finite(*out, "softmax_rows");
  if (tape.track(a)) {
    tape.record(out, [a, out, n, m]() {
      a->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        Real dot = 0;
        for (std::size_t j = 0; j < m; ++j) dot += out->grad[i * m + j] * out->data[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          a->grad[i * m + j] += out->data[i * m + j] * (out->grad[i * m + j] - dot);
      }
    });
  }
  return out;
}

/// Two-way softmax over paired logits, elementwise over same-shape tensors:
/// exp(p/tau) / (exp(p/tau) + exp(q/tau)), computed with max-subtraction.
template <typename Real>
TensorPtr<Real> softmax_pair(Tape<Real>& tape, const TensorPtr<Real>& p, const TensorPtr<Real>& q,
                             Real tau) {
  detail::require(p->shape == q->shape, "softmax_pair", "shapes differ");
  if (!(tau > Real(0))) throw NumericError("softmax_pair: tau must be positive");
  auto out = zeros<Real>(p->shape);
  for (std::size_t i = 0; i < out->numel(); ++i) {
    Real sp = p->data[i] / tau, sq = q->data[i] / tau;
    Real mx = std::max(sp, sq);
    Real ep = std::exp(sp - mx), eq = std::exp(sq - mx);
    out->data[i] = ep / (ep + eq);
  }
  detail::check_finite(*out, "softmax_pair");
  if (tape.track(p, q)) {
    tape.record(out, [p, q, out, tau]() {
      for (std::size_t i = 0; i < out->numel(); ++i) {
        Real y = out->data[i];
        Real d = out->grad[i] * y * (Real(1) - y) / tau;
        if (p->requires_grad) {
          p->ensure_grad();
          p->grad[i] += d;
        }
        if (q->requires_grad) {
          q->ensure_grad();
          q->grad[i] -= d;
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename Real>
Real vec_norm(const Real* v, std::size_t n) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

}  // namespace detail

/// Cosine similarity of each row of V against u: [n,d],[d] -> [n].
/// No epsilon is added; a zero-norm row or query is an error.
template <typename Real>
TensorPtr<Real> cosine_rows(Tape<Real>& tape, const TensorPtr<Real>& v, const TensorPtr<Real>& u) {
  detail::require(v->shape.size() == 2 && u->shape.size() == 1, "cosine_rows",
                  "matrix and vector required");
  const std::size_t n = v->shape[0], d = v->shape[1];
  detail::require(u->shape[0] == d, "cosine_rows", "dimension mismatch");
  const Real un = detail::vec_norm(u->data.data(), d);
  if (un == Real(0)) throw NumericError("cosine_rows: zero-norm query vector");
  auto out = zeros<Real>({n});
  std::vector<Real> row_norms(n), dots(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real* row = v->data.data() + i * d;
    Real rn = detail::vec_norm(row, d);
    if (rn == Real(0))
      throw NumericError("cosine_rows: zero-norm row " + std::to_string(i));
    Real dot = 0;
    for (std::size_t j = 0; j < d; ++j) dot += row[j] * u->data[j];
    row_norms[i] = rn;
    dots[i] = dot;
    out->data[i] = dot / (rn * un);
  }
  detail::check_finite(*out, "cosine_rows");
  if (tape.track(v, u)) {
    tape.record(out, [v, u, out, n, d, un, row_norms, dots]() {
      for (std::size_t i = 0; i < n; ++i) {
        Real g = out->grad[i];
        if (g == Real(0)) continue;
        const Real* row = v->data.data() + i * d;
        Real rn = row_norms[i], c = out->data[i];
        if (v->requires_grad) {
          v->ensure_grad();
          for (std::size_t j = 0; j < d; ++j)
            v->grad[i * d + j] += g * (u->data[j] / (rn * un) - c * row[j] / (rn * rn));
        }
        if (u->requires_grad) {
          u->ensure_grad();
          for (std::size_t j = 0; j < d; ++j)
            u->grad[j] += g * (row[j] / (rn * un) - c * u->data[j] / (un * un));
        }
      }
    });
  }
  return out;
}

/// Cosine similarity of two vectors; scalar output in [-1, 1].
template <typename Real>
TensorPtr<Real> cosine(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  detail::require(a->shape.size() == 1 && b->shape.size() == 1 && a->shape == b->shape, "cosine",
                  "equal-length vectors required");
  auto arow = reshape(tape, a, {1, a->shape[0]});
  auto c = cosine_rows(tape, arow, b);
  return reshape(tape, c, {1});
}

namespace detail {

// Error-free accumulation (Shewchuk expansion): the final rounded sum does
// not depend on summand order, which makes Eq-style weighted aggregation
// exactly permutation invariant.
template <typename Real>
class ExactSum {
 public:
  void add(Real value) {
    std::size_t used = 0;
    for (std::size_t i = 0; i < parts_.size(); ++i) {
      Real p = parts_[i];
      Real s = value + p;
      Real bv = s - value;
      Real err = (value - (s - bv)) + (p - bv);
      if (err != Real(0)) parts_[used++] = err;
      value = s;
    }
    parts_.resize(used);
    parts_.push_back(value);
  }
  Real round() const {
    Real s = 0;
    for (Real p : parts_) s += p;
    return s;
  }

 private:
  std::vector<Real> parts_;
};

}  // namespace detail

/// Weighted mean over rows: r[d] = sum_i w[i] S[i,d] / sum_i w[i].
/// Sums are accumulated exactly, so jointly permuting (row, weight) pairs
/// leaves the result bitwise unchanged. A non-positive weight sum is an error.
template <typename Real>
TensorPtr<Real> weighted_mean_rows(Tape<Real>& tape, const TensorPtr<Real>& s,
                                   const TensorPtr<Real>& w) {
  detail::require(s->shape.size() == 2 && w->shape.size() == 1, "weighted_mean_rows",
                  "matrix and vector required");
  const std::size_t n = s->shape[0], d = s->shape[1];
  detail::require(w->shape[0] == n, "weighted_mean_rows", "weight count does not match rows");
  detail::ExactSum<Real> den_sum;
  for (std::size_t i = 0; i < n; ++i) den_sum.add(w->data[i]);
  const Real den = den_sum.round();
  if (!(den > Real(0))) throw NumericError("weighted_mean_rows: degenerate weights (sum <= 0)");
  auto out = zeros<Real>({d});
  for (std::size_t j = 0; j < d; ++j) {
    detail::ExactSum<Real> acc;
    for (std::size_t i = 0; i < n; ++i) acc.add(w->data[i] * s->data[i * d + j]);
    out->data[j] = acc.round() / den;
  }
  detail::check_finite(*out, "weighted_mean_rows");
  if (tape.track(s, w)) {
    tape.record(out, [s, w, out, n, d, den]() {
      if (s->requires_grad) {
        s->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            s->grad[i * d + j] += out->grad[j] * w->data[i] / den;
      }
      if (w->requires_grad) {
        w->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          Real acc = 0;
          for (std::size_t j = 0; j < d; ++j)
            acc += out->grad[j] * (s->data[i * d + j] - out->data[j]) / den;
          w->grad[i] += acc;
        }
      }
    });
  }
  return out;
}

/// Gather scalar nodes into one rank-1 tensor (batch losses, batch scores).
template <typename Real>
TensorPtr<Real> stack_scalars(Tape<Real>& tape, const std::vector<TensorPtr<Real>>& xs) {
  detail::require(!xs.empty(), "stack_scalars", "empty input list");
  auto out = zeros<Real>({xs.size()});
  bool any_grad = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::require(xs[i]->numel() == 1, "stack_scalars", "scalar inputs required");
    out->data[i] = xs[i]->data[0];
    any_grad = any_grad || xs[i]->requires_grad;
  }
  if (tape.recording() && any_grad) {
    tape.record(out, [xs, out]() {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!xs[i]->requires_grad) continue;
        xs[i]->ensure_grad();
        xs[i]->grad[0] += out->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of a scalar-valued function against the recorded
/// backward pass. Returns the max over all input coordinates of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename F>
double grad_check(F&& f, const std::vector<TensorPtr<double>>& inputs, double h = 1e-5) {
  for (const auto& t : inputs) {
    t->requires_grad = true;
    t->zero_grad();
  }
  Tape<double> tape;
  auto loss = f(tape, inputs);
  if (loss->numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    t->ensure_grad();
    analytic.push_back(t->grad);
  }

  double worst = 0.0;
  Tape<double> probe;
  probe.set_recording(false);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double orig = t->data[i];
      t->data[i] = orig + h;
      double fp = f(probe, inputs)->data[0];
      t->data[i] = orig - h;
      double fm = f(probe, inputs)->data[0];
      t->data[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[ti][i];
      double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace aov
