#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowgen/rng.hpp"

namespace flowgen {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major array with optional gradient buffer. T is float for
// training and double for finite-difference checks.
// ---------------------------------------------------------------------------

template <class T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same size as value
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    int64_t count = numel_of(shape);
    check(count >= 0, "tensor: negative extent in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), T(0));
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT full(std::vector<int> shape, T v, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static TensorT from_data(std::vector<int> shape, std::vector<T> data,
                           bool requires_grad = false) {
    check(numel_of(shape) == static_cast<int64_t>(data.size()),
          "tensor: data length " + std::to_string(data.size()) +
              " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static TensorT randn(std::vector<int> shape, Rng& rng, T stddev,
                       bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
  int dim(int i) const {
    int r = static_cast<int>(n_->shape.size());
    if (i < 0) i += r;
    return n_->shape[i];
  }
  int rank() const { return static_cast<int>(n_->shape.size()); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool grad_allocated() const { return !n_->grad.empty(); }
  std::vector<T>& grad() {
    check(n_->requires_grad, "tensor: grad access on requires_grad=false tensor");
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    check(!n_->grad.empty(), "tensor: grad not populated");
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    check(numel() == 1, "tensor: item() on non-scalar " + shape_str(shape()));
    return n_->value[0];
  }

  TensorT detached_copy() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return TensorT(std::move(n));
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed operations. Execution order is a valid
// topological order; backward walks it in exact reverse.
// ---------------------------------------------------------------------------

template <class T>
class TapeT {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }
  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void backward(TensorT<T> loss) {
    check(loss.numel() == 1,
          "backward: loss must be scalar, got " + shape_str(loss.shape()));
    check(!ops_.empty(), "backward: empty tape");
    check(loss.requires_grad(), "backward: loss does not require grad");
    loss.grad().assign(1, T(1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Tensor64 = TensorT<double>;
using Tape64 = TapeT<double>;

namespace detail {

template <class T>
bool want_grad(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> ins) {
  if (!tape) return false;
  for (const auto* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// gemm kernels: C[M,N] += op(A) * op(B); all row-major, accumulate into C
template <class T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<size_t>(i) * K;
    T* c = C + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<size_t>(i) * K;
    T* c = C + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<size_t>(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(int M, int K, int N, const T* A, const T* B, T* C) {
  for (int k = 0; k < K; ++k) {
    const T* a = A + static_cast<size_t>(k) * M;
    const T* b = B + static_cast<size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      T av = a[i];
      if (av == T(0)) continue;
      T* c = C + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

inline std::vector<int> leading_dims(const std::vector<int>& s, int keep_last) {
  return std::vector<int>(s.begin(), s.end() - keep_last);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(TapeT<T>* tape, TensorT<T> a, TensorT<T> b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (detail::want_grad(tape, {&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> sub(TapeT<T>* tape, TensorT<T> a, TensorT<T> b) {
  check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (detail::want_grad(tape, {&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> mul(TapeT<T>* tape, TensorT<T> a, TensorT<T> b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  if (detail::want_grad(tape, {&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> scale(TapeT<T>* tape, TensorT<T> a, T c) {
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * c;
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn, c] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * c;
    });
  }
  return y;
}

template <class T>
TensorT<T> exp(TapeT<T>* tape, TensorT<T> a) {
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = std::exp(av[i]);
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i)
        an->grad[i] += yn->grad[i] * yn->value[i];
    });
  }
  return y;
}

template <class T>
TensorT<T> tanh(TapeT<T>* tape, TensorT<T> a) {
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = std::tanh(av[i]);
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i)
        an->grad[i] += yn->grad[i] * (T(1) - yn->value[i] * yn->value[i]);
    });
  }
  return y;
}

template <class T>
TensorT<T> silu(TapeT<T>* tape, TensorT<T> a) {
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) {
    T s = T(1) / (T(1) + std::exp(-av[i]));
    yv[i] = av[i] * s;
  }
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i) {
        T x = an->value[i];
        T s = T(1) / (T(1) + std::exp(-x));
        an->grad[i] += yn->grad[i] * s * (T(1) + x * (T(1) - s));
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> minimum(TapeT<T>* tape, TensorT<T> a, TensorT<T> b) {
  check(a.shape() == b.shape(), "minimum: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = std::min(av[i], bv[i]);
  if (detail::want_grad(tape, {&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      for (size_t i = 0; i < g.size(); ++i) {
        bool a_wins = an->value[i] <= bn->value[i];  // ties go to a
        if (a_wins && an->requires_grad) {
          an->ensure_grad();
          an->grad[i] += g[i];
        } else if (!a_wins && bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] += g[i];
        }
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> clamp(TapeT<T>* tape, TensorT<T> a, T lo, T hi) {
  TensorT<T> y = TensorT<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& yv = y.data();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = std::min(hi, std::max(lo, av[i]));
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn, lo, hi] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i) {
        T x = an->value[i];
        if (x >= lo && x <= hi) an->grad[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> sum(TapeT<T>* tape, TensorT<T> a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  TensorT<T> y = TensorT<T>::scalar(acc);
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      T g = yn->grad[0];
      for (auto& gv : an->grad) gv += g;
    });
  }
  return y;
}

template <class T>
TensorT<T> mean(TapeT<T>* tape, TensorT<T> a) {
  check(a.numel() > 0, "mean: empty tensor");
  T acc = T(0);
  for (T v : a.data()) acc += v;
  T inv = T(1) / static_cast<T>(a.numel());
  TensorT<T> y = TensorT<T>::scalar(acc * inv);
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn, inv] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      T g = yn->grad[0] * inv;
      for (auto& gv : an->grad) gv += g;
    });
  }
  return y;
}

// y[r,:] = x[r,:] + v  for every leading row r
template <class T>
TensorT<T> add_rowvec(TapeT<T>* tape, TensorT<T> x, TensorT<T> v) {
  check(v.rank() == 1 && x.dim(-1) == v.dim(0),
        "add_rowvec: last dim of " + shape_str(x.shape()) + " vs vector " +
            shape_str(v.shape()));
  int D = v.dim(0);
  int64_t rows = x.numel() / D;
  TensorT<T> y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.data();
  const auto& vv = v.data();
  auto& yv = y.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < D; ++j) yv[r * D + j] = xv[r * D + j] + vv[j];
  if (detail::want_grad(tape, {&x, &v})) {
    y.set_requires_grad(true);
    auto xn = x.node(), vn = v.node(), yn = y.node();
    tape->record([xn, vn, yn, rows, D] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < D; ++j) vn->grad[j] += g[r * D + j];
      }
    });
  }
  return y;
}

// y[r,:] = x[r,:] * w  (elementwise over last dim), the RMSNorm gain
template <class T>
TensorT<T> row_scale(TapeT<T>* tape, TensorT<T> x, TensorT<T> w) {
  check(w.rank() == 1 && x.dim(-1) == w.dim(0),
        "row_scale: last dim of " + shape_str(x.shape()) + " vs vector " +
            shape_str(w.shape()));
  int D = w.dim(0);
  int64_t rows = x.numel() / D;
  TensorT<T> y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& yv = y.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < D; ++j) yv[r * D + j] = xv[r * D + j] * wv[j];
  if (detail::want_grad(tape, {&x, &w})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), yn = y.node();
    tape->record([xn, wn, yn, rows, D] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < D; ++j) xn->grad[r * D + j] += g[r * D + j] * wn->value[j];
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < D; ++j) wn->grad[j] += g[r * D + j] * xn->value[r * D + j];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape primitives
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(TapeT<T>* tape, TensorT<T> a, std::vector<int> new_shape) {
  check(numel_of(new_shape) == a.numel(),
        "reshape: cannot view " + shape_str(a.shape()) + " as " +
            shape_str(new_shape));
  TensorT<T> y = TensorT<T>::from_data(std::move(new_shape), a.data());
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
    });
  }
  return y;
}

// swap the last two axes; leading axes are batch
template <class T>
TensorT<T> transpose(TapeT<T>* tape, TensorT<T> a) {
  check(a.rank() >= 2, "transpose: need rank >= 2, got " + shape_str(a.shape()));
  std::vector<int> ys = a.shape();
  int R = ys[ys.size() - 2], C = ys[ys.size() - 1];
  std::swap(ys[ys.size() - 2], ys[ys.size() - 1]);
  int64_t batch = a.numel() / (static_cast<int64_t>(R) * C);
  TensorT<T> y = TensorT<T>::zeros(ys);
  const auto& av = a.data();
  auto& yv = y.data();
  for (int64_t b = 0; b < batch; ++b) {
    const T* src = av.data() + b * R * C;
    T* dst = yv.data() + b * R * C;
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j) dst[static_cast<size_t>(j) * R + i] = src[static_cast<size_t>(i) * C + j];
  }
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn, batch, R, C] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (int64_t b = 0; b < batch; ++b) {
        const T* g = yn->grad.data() + b * R * C;
        T* dst = an->grad.data() + b * R * C;
        for (int j = 0; j < C; ++j)
          for (int i = 0; i < R; ++i) dst[static_cast<size_t>(i) * C + j] += g[static_cast<size_t>(j) * R + i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> slice(TapeT<T>* tape, TensorT<T> a, int axis, int start, int len) {
  check(axis >= 0 && axis < a.rank(), "slice: bad axis");
  check(start >= 0 && len >= 0 && start + len <= a.dim(axis),
        "slice: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") out of bounds for axis extent " +
            std::to_string(a.dim(axis)));
  std::vector<int> ys = a.shape();
  ys[axis] = len;
  TensorT<T> y = TensorT<T>::zeros(ys);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  int64_t a_ax = a.dim(axis);
  const auto& av = a.data();
  auto& yv = y.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * a_ax + start) * inner, len * inner,
                yv.data() + o * len * inner);
  if (detail::want_grad(tape, {&a})) {
    y.set_requires_grad(true);
    auto an = a.node(), yn = y.node();
    tape->record([an, yn, outer, inner, a_ax, start, len] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* g = yn->grad.data() + o * len * inner;
        T* dst = an->grad.data() + (o * a_ax + start) * inner;
        for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += g[i];
      }
    });
  }
  return y;
}

template <class T>
TensorT<T> concat(TapeT<T>* tape, const std::vector<TensorT<T>>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  std::vector<int> ys = parts[0].shape();
  check(axis >= 0 && axis < static_cast<int>(ys.size()), "concat: bad axis");
  int total = 0;
  for (const auto& p : parts) {
    check(p.rank() == static_cast<int>(ys.size()), "concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      check(i == axis || p.dim(i) == ys[i],
            "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  ys[axis] = total;
  TensorT<T> y = TensorT<T>::zeros(ys);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= ys[i];
  for (size_t i = axis + 1; i < ys.size(); ++i) inner *= ys[i];
  auto& yv = y.data();
  int offset = 0;
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  for (const auto& p : parts) {
    int len = p.dim(axis);
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * len * inner, len * inner,
                  yv.data() + (o * total + offset) * inner);
    offset += len;
  }
  if (tape && rg) {
    y.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<int> lens;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      lens.push_back(p.dim(axis));
    }
    auto yn = y.node();
    tape->record([nodes, lens, yn, outer, inner, total] {
      if (yn->grad.empty()) return;
      int off = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        int len = lens[pi];
        if (nodes[pi]->requires_grad) {
          nodes[pi]->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const T* g = yn->grad.data() + (o * total + off) * inner;
            T* dst = nodes[pi]->grad.data() + o * len * inner;
            for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += g[i];
          }
        }
        off += len;
      }
    });
  }
  return y;
}

// [T, H*D] -> [H, T, D]
template <class T>
TensorT<T> split_heads(TapeT<T>* tape, TensorT<T> x, int heads) {
  check(x.rank() == 2 && x.dim(1) % heads == 0,
        "split_heads: cannot split " + shape_str(x.shape()) + " into " +
            std::to_string(heads) + " heads");
  int Tn = x.dim(0), D = x.dim(1) / heads;
  TensorT<T> y = TensorT<T>::zeros({heads, Tn, D});
  const auto& xv = x.data();
  auto& yv = y.data();
  for (int t = 0; t < Tn; ++t)
    for (int h = 0; h < heads; ++h)
      std::copy_n(xv.data() + (static_cast<size_t>(t) * heads + h) * D, D,
                  yv.data() + (static_cast<size_t>(h) * Tn + t) * D);
  if (detail::want_grad(tape, {&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, heads, Tn, D] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (int t = 0; t < Tn; ++t)
        for (int h = 0; h < heads; ++h) {
          const T* g = yn->grad.data() + (static_cast<size_t>(h) * Tn + t) * D;
          T* dst = xn->grad.data() + (static_cast<size_t>(t) * heads + h) * D;
          for (int d = 0; d < D; ++d) dst[d] += g[d];
        }
    });
  }
  return y;
}

// [H, T, D] -> [T, H*D]
template <class T>
TensorT<T> merge_heads(TapeT<T>* tape, TensorT<T> x) {
  check(x.rank() == 3, "merge_heads: expected [H,T,D], got " + shape_str(x.shape()));
  int H = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  TensorT<T> y = TensorT<T>::zeros({Tn, H * D});
  const auto& xv = x.data();
  auto& yv = y.data();
  for (int h = 0; h < H; ++h)
    for (int t = 0; t < Tn; ++t)
      std::copy_n(xv.data() + (static_cast<size_t>(h) * Tn + t) * D, D,
                  yv.data() + (static_cast<size_t>(t) * H + h) * D);
  if (detail::want_grad(tape, {&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, H, Tn, D] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (int h = 0; h < H; ++h)
        for (int t = 0; t < Tn; ++t) {
          const T* g = yn->grad.data() + (static_cast<size_t>(t) * H + h) * D;
          T* dst = xn->grad.data() + (static_cast<size_t>(h) * Tn + t) * D;
          for (int d = 0; d < D; ++d) dst[d] += g[d];
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// a [..., M, K] x b [..., K, N]; leading dims must match exactly (no broadcast
// beyond shared leading batch), or b may be rank-2 and is then shared.
template <class T>
TensorT<T> matmul(TapeT<T>* tape, TensorT<T> a, TensorT<T> b) {
  check(a.rank() >= 2 && b.rank() >= 2,
        "matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  int M = a.dim(-2), K = a.dim(-1);
  int Kb = b.dim(-2), N = b.dim(-1);
  check(K == Kb, "matmul: inner dim mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  bool shared_b = (b.rank() == 2 && a.rank() > 2);
  std::vector<int> ys;
  if (shared_b) {
    ys = a.shape();
    ys.back() = N;
  } else {
    check(detail::leading_dims(a.shape(), 2) == detail::leading_dims(b.shape(), 2),
          "matmul: batch dims mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
    ys = a.shape();
    ys.back() = N;
  }
  int64_t batch = a.numel() / (static_cast<int64_t>(M) * K);
  TensorT<T> y = TensorT<T>::zeros(ys);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* yv = y.data().data();
  for (int64_t i = 0; i < batch; ++i)
    detail::gemm_nn(M, K, N, av + i * M * K, shared_b ? bv : bv + i * K * N,
                    yv + i * M * N);
  if (detail::want_grad(tape, {&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([an, bn, yn, batch, M, K, N, shared_b] {
      if (yn->grad.empty()) return;
      for (int64_t i = 0; i < batch; ++i) {
        const T* g = yn->grad.data() + i * M * N;
        const T* bb = shared_b ? bn->value.data() : bn->value.data() + i * K * N;
        const T* aa = an->value.data() + i * M * K;
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm_nt(M, N, K, g, bb, an->grad.data() + i * M * K);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          T* gb = shared_b ? bn->grad.data() : bn->grad.data() + i * K * N;
          detail::gemm_tn(K, M, N, aa, g, gb);
        }
      }
    });
  }
  return y;
}

// x [..., K] -> y [..., N] with weight [N, K] and optional bias [N]
template <class T>
TensorT<T> linear(TapeT<T>* tape, TensorT<T> x, TensorT<T> w, TensorT<T> b = {}) {
  check(w.rank() == 2, "linear: weight must be rank 2, got " + shape_str(w.shape()));
  int K = x.dim(-1), N = w.dim(0);
  check(w.dim(1) == K, "linear: input " + shape_str(x.shape()) +
                           " incompatible with weight " + shape_str(w.shape()));
  if (b.defined())
    check(b.rank() == 1 && b.dim(0) == N,
          "linear: bias " + shape_str(b.shape()) + " incompatible with weight " +
              shape_str(w.shape()));
  int64_t rows = x.numel() / K;
  std::vector<int> ys = x.shape();
  ys.back() = N;
  TensorT<T> y = TensorT<T>::zeros(ys);
  const T* xv = x.data().data();
  T* yv = y.data().data();
  detail::gemm_nt(static_cast<int>(rows), K, N, xv, w.data().data(), yv);
  if (b.defined()) {
    const auto& bv = b.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < N; ++j) yv[r * N + j] += bv[j];
  }
  bool rg = b.defined() ? detail::want_grad(tape, {&x, &w, &b})
                        : detail::want_grad(tape, {&x, &w});
  if (rg) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = b.defined() ? b.node() : nullptr;
    tape->record([xn, wn, bn, yn, rows, K, N] {
      if (yn->grad.empty()) return;
      const T* g = yn->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::gemm_nn(static_cast<int>(rows), N, K, g, wn->value.data(),
                        xn->grad.data());
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm_tn(N, static_cast<int>(rows), K, g, xn->value.data(),
                        wn->grad.data());
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < N; ++j) bn->grad[j] += g[r * N + j];
      }
    });
  }
  return y;
}

// table [V, D], ids in [0, V) -> y [ids.size(), D]
template <class T>
TensorT<T> embedding(TapeT<T>* tape, TensorT<T> table, const std::vector<int>& ids) {
  check(table.rank() == 2, "embedding: table must be rank 2");
  int V = table.dim(0), D = table.dim(1);
  for (int id : ids)
    check(id >= 0 && id < V, "embedding: id " + std::to_string(id) +
                                 " out of range [0," + std::to_string(V) + ")");
  TensorT<T> y = TensorT<T>::zeros({static_cast<int>(ids.size()), D});
  const auto& tv = table.data();
  auto& yv = y.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * D, D, yv.data() + i * D);
  if (detail::want_grad(tape, {&table})) {
    y.set_requires_grad(true);
    auto tn = table.node(), yn = y.node();
    tape->record([tn, yn, ids, D] {
      if (yn->grad.empty()) return;
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* g = yn->grad.data() + i * D;
        T* dst = tn->grad.data() + static_cast<size_t>(ids[i]) * D;
        for (int j = 0; j < D; ++j) dst[j] += g[j];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization and activations over the last axis
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> softmax(TapeT<T>* tape, TensorT<T> x) {
  int D = x.dim(-1);
  int64_t rows = x.numel() / D;
  TensorT<T> y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& yv = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * D;
    T* out = yv.data() + r * D;
    T mx = in[0];
    for (int j = 1; j < D; ++j) mx = std::max(mx, in[j]);
    T z = T(0);
    for (int j = 0; j < D; ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    T inv = T(1) / z;
    for (int j = 0; j < D; ++j) out[j] *= inv;
  }
  if (detail::want_grad(tape, {&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, rows, D] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = yn->value.data() + r * D;
        const T* g = yn->grad.data() + r * D;
        T dot = T(0);
        for (int j = 0; j < D; ++j) dot += g[j] * p[j];
        T* dst = xn->grad.data() + r * D;
        for (int j = 0; j < D; ++j) dst[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

inline constexpr double kRmsNormEps = 1e-5;

template <class T>
TensorT<T> rms_normalize(TapeT<T>* tape, TensorT<T> x) {
  int D = x.dim(-1);
  int64_t rows = x.numel() / D;
  TensorT<T> y = TensorT<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& yv = y.data();
  std::vector<T> rinv(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * D;
    T ms = T(0);
    for (int j = 0; j < D; ++j) ms += in[j] * in[j];
    ms /= static_cast<T>(D);
    T rv = T(1) / std::sqrt(ms + static_cast<T>(kRmsNormEps));
    rinv[r] = rv;
    T* out = yv.data() + r * D;
    for (int j = 0; j < D; ++j) out[j] = in[j] * rv;
  }
  if (detail::want_grad(tape, {&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, rows, D, rinv] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* in = xn->value.data() + r * D;
        const T* g = yn->grad.data() + r * D;
        T rv = rinv[r];
        T s = T(0);
        for (int j = 0; j < D; ++j) s += g[j] * in[j];
        T c = rv * rv * rv * s / static_cast<T>(D);
        T* dst = xn->grad.data() + r * D;
        for (int j = 0; j < D; ++j) dst[j] += g[j] * rv - in[j] * c;
      }
    });
  }
  return y;
}

// rotary position encoding on x [H, T, D] (D even), positions start_pos..start_pos+T-1
inline void rope_trig(int t_count, int start_pos, int head_dim, double base,
                      std::vector<double>& out) {
  int half = head_dim / 2;
  out.resize(static_cast<size_t>(t_count) * half * 2);
  for (int t = 0; t < t_count; ++t)
    for (int j = 0; j < half; ++j) {
      double theta = (start_pos + t) * std::pow(base, -2.0 * j / head_dim);
      out[(static_cast<size_t>(t) * half + j) * 2] = std::cos(theta);
      out[(static_cast<size_t>(t) * half + j) * 2 + 1] = std::sin(theta);
    }
}

template <class T>
TensorT<T> rope(TapeT<T>* tape, TensorT<T> x, int start_pos = 0,
                double base = 10000.0) {
  check(x.rank() == 3, "rope: expected [H,T,D], got " + shape_str(x.shape()));
  int H = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  check(D % 2 == 0, "rope: head dim must be even");
  int half = D / 2;
  auto trig = std::make_shared<std::vector<double>>();
  rope_trig(Tn, start_pos, D, base, *trig);
  auto rotate = [H, Tn, D, half, trig](const T* in, T* out, bool inverse) {
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < Tn; ++t) {
        const T* src = in + (static_cast<size_t>(h) * Tn + t) * D;
        T* dst = out + (static_cast<size_t>(h) * Tn + t) * D;
        for (int j = 0; j < half; ++j) {
          T c = static_cast<T>((*trig)[(static_cast<size_t>(t) * half + j) * 2]);
          T s = static_cast<T>((*trig)[(static_cast<size_t>(t) * half + j) * 2 + 1]);
          if (inverse) s = -s;
          T x0 = src[2 * j], x1 = src[2 * j + 1];
          dst[2 * j] += x0 * c - x1 * s;
          dst[2 * j + 1] += x0 * s + x1 * c;
        }
      }
  };
  TensorT<T> y = TensorT<T>::zeros(x.shape());
  rotate(x.data().data(), y.data().data(), false);
  if (detail::want_grad(tape, {&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    tape->record([xn, yn, rotate] {
     if (yn->grad.empty()) return;
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      rotate(yn->grad.data(), xn->grad.data(), true);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Attention (fused): q [H,Tq,D], k [H,Tk,D], v [H,Tk,D] -> [H,Tq,D].
// causal requires Tq == Tk and masks j > i.
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> scaled_dot_product_attention(TapeT<T>* tape, TensorT<T> q, TensorT<T> k,
                                        TensorT<T> v, bool causal) {
  check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
        "attention: expected rank-3 [H,T,D] inputs");
  int H = q.dim(0), Tq = q.dim(1), D = q.dim(2);
  int Tk = k.dim(1);
  check(k.dim(0) == H && v.dim(0) == H && k.dim(2) == D && v.dim(2) == D &&
            v.dim(1) == Tk,
        "attention: shape mismatch q" + shape_str(q.shape()) + " k" +
            shape_str(k.shape()) + " v" + shape_str(v.shape()));
  if (causal)
    check(Tq == Tk, "attention: causal mask requires square scores");
  T scl = T(1) / std::sqrt(static_cast<T>(D));
  TensorT<T> y = TensorT<T>::zeros(q.shape());
  // keep probs for backward
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(H) * Tq * Tk, T(0));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  T* yv = y.data().data();
  for (int h = 0; h < H; ++h) {
    const T* qh = qv + static_cast<size_t>(h) * Tq * D;
    const T* kh = kv + static_cast<size_t>(h) * Tk * D;
    const T* vh = vv + static_cast<size_t>(h) * Tk * D;
    T* ph = probs->data() + static_cast<size_t>(h) * Tq * Tk;
    T* yh = yv + static_cast<size_t>(h) * Tq * D;
    for (int i = 0; i < Tq; ++i) {
      int jmax = causal ? i + 1 : Tk;
      T* row = ph + static_cast<size_t>(i) * Tk;
      const T* qi = qh + static_cast<size_t>(i) * D;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < jmax; ++j) {
        const T* kj = kh + static_cast<size_t>(j) * D;
        T acc = T(0);
        for (int d = 0; d < D; ++d) acc += qi[d] * kj[d];
        row[j] = acc * scl;
        mx = std::max(mx, row[j]);
      }
      T z = T(0);
      for (int j = 0; j < jmax; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      T inv = T(1) / z;
      for (int j = 0; j < jmax; ++j) row[j] *= inv;
      // y_i = sum_j p_ij v_j
      T* yi = yh + static_cast<size_t>(i) * D;
      for (int j = 0; j < jmax; ++j) {
        T p = row[j];
        if (p == T(0)) continue;
        const T* vj = vh + static_cast<size_t>(j) * D;
        for (int d = 0; d < D; ++d) yi[d] += p * vj[d];
      }
    }
  }
  if (detail::want_grad(tape, {&q, &k, &v})) {
    y.set_requires_grad(true);
    auto qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node();
    tape->record([qn, kn, vn, yn, probs, H, Tq, Tk, D, scl, causal] {
      if (yn->grad.empty()) return;
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      std::vector<T> dP(static_cast<size_t>(Tq) * Tk);
      std::vector<T> dS(static_cast<size_t>(Tq) * Tk);
      for (int h = 0; h < H; ++h) {
        const T* ph = probs->data() + static_cast<size_t>(h) * Tq * Tk;
        const T* go = yn->grad.data() + static_cast<size_t>(h) * Tq * D;
        const T* vh = vn->value.data() + static_cast<size_t>(h) * Tk * D;
        const T* qh = qn->value.data() + static_cast<size_t>(h) * Tq * D;
        const T* kh = kn->value.data() + static_cast<size_t>(h) * Tk * D;
        // dV += P^T dO
        if (vn->requires_grad) {
          T* dv = vn->grad.data() + static_cast<size_t>(h) * Tk * D;
          detail::gemm_tn(Tk, Tq, D, ph, go, dv);
        }
        // dP = dO V^T ; dS = P o (dP - rowsum(dP o P)) * scl
        std::fill(dP.begin(), dP.end(), T(0));
        detail::gemm_nt(Tq, D, Tk, go, vh, dP.data());
        for (int i = 0; i < Tq; ++i) {
          int jmax = causal ? i + 1 : Tk;
          const T* prow = ph + static_cast<size_t>(i) * Tk;
          const T* dprow = dP.data() + static_cast<size_t>(i) * Tk;
          T* dsrow = dS.data() + static_cast<size_t>(i) * Tk;
          T dot = T(0);
          for (int j = 0; j < jmax; ++j) dot += dprow[j] * prow[j];
          for (int j = 0; j < jmax; ++j)
            dsrow[j] = prow[j] * (dprow[j] - dot) * scl;
          for (int j = jmax; j < Tk; ++j) dsrow[j] = T(0);
        }
        if (qn->requires_grad) {
          T* dq = qn->grad.data() + static_cast<size_t>(h) * Tq * D;
          detail::gemm_nn(Tq, Tk, D, dS.data(), kh, dq);
        }
        if (kn->requires_grad) {
          T* dk = kn->grad.data() + static_cast<size_t>(h) * Tk * D;
          detail::gemm_tn(Tk, Tq, D, dS.data(), qh, dk);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// mean next-token cross entropy over rows where mask != 0
template <class T>
TensorT<T> cross_entropy(TapeT<T>* tape, TensorT<T> logits,
                         const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask) {
  check(logits.rank() == 2, "cross_entropy: logits must be [N,V], got " +
                                shape_str(logits.shape()));
  int N = logits.dim(0), V = logits.dim(1);
  check(static_cast<int>(targets.size()) == N && static_cast<int>(mask.size()) == N,
        "cross_entropy: targets/mask length mismatch with logits " +
            shape_str(logits.shape()));
  int64_t m = 0;
  for (uint8_t b : mask) m += (b != 0);
  check(m > 0, "cross_entropy: empty mask");
  const auto& zv = logits.data();
  T loss = T(0);
  for (int i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    check(targets[i] >= 0 && targets[i] < V,
          "cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    const T* z = zv.data() + static_cast<size_t>(i) * V;
    T mx = z[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, z[j]);
    T lse = T(0);
    for (int j = 0; j < V; ++j) lse += std::exp(z[j] - mx);
    lse = std::log(lse) + mx;
    loss += lse - z[targets[i]];
  }
  T inv = T(1) / static_cast<T>(m);
  TensorT<T> y = TensorT<T>::scalar(loss * inv);
  if (detail::want_grad(tape, {&logits})) {
    y.set_requires_grad(true);
    auto zn = logits.node(), yn = y.node();
    auto tgts = targets;
    auto msk = mask;
    tape->record([zn, yn, tgts, msk, N, V, inv] {
      if (yn->grad.empty()) return;
      zn->ensure_grad();
      T g = yn->grad[0] * inv;
      for (int i = 0; i < N; ++i) {
        if (!msk[i]) continue;
        const T* z = zn->value.data() + static_cast<size_t>(i) * V;
        T* dz = zn->grad.data() + static_cast<size_t>(i) * V;
        T mx = z[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, z[j]);
        T sum = T(0);
        for (int j = 0; j < V; ++j) sum += std::exp(z[j] - mx);
        T zinv = T(1) / sum;
        for (int j = 0; j < V; ++j) dz[j] += g * std::exp(z[j] - mx) * zinv;
        dz[tgts[i]] -= g;
      }
    });
  }
  return y;
}

// mean squared error over elements where mask != 0 (all elements if mask empty).
// Masked-out predictions and targets are never read.
template <class T>
TensorT<T> mean_squared_error(TapeT<T>* tape, TensorT<T> pred, TensorT<T> target,
                              const std::vector<uint8_t>& mask = {}) {
  check(pred.shape() == target.shape(),
        "mean_squared_error: shape mismatch " + shape_str(pred.shape()) +
            " vs " + shape_str(target.shape()));
  if (!mask.empty())
    check(static_cast<int64_t>(mask.size()) == pred.numel(),
          "mean_squared_error: mask length mismatch");
  const auto& pv = pred.data();
  const auto& tv = target.data();
  int64_t m = 0;
  T loss = T(0);
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    T d = pv[i] - tv[i];
    loss += d * d;
    ++m;
  }
  check(m > 0, "mean_squared_error: empty mask");
  T inv = T(1) / static_cast<T>(m);
  TensorT<T> y = TensorT<T>::scalar(loss * inv);
  if (detail::want_grad(tape, {&pred, &target})) {
    y.set_requires_grad(true);
    auto pn = pred.node(), tn = target.node(), yn = y.node();
    auto msk = mask;
    tape->record([pn, tn, yn, msk, inv] {
      if (yn->grad.empty()) return;
      T g = yn->grad[0] * inv * T(2);
      for (size_t i = 0; i < pn->value.size(); ++i) {
        if (!msk.empty() && !msk[i]) continue;
        T d = pn->value[i] - tn->value[i];
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g * d;
        }
        if (tn->requires_grad) {
          tn->ensure_grad();
          tn->grad[i] -= g * d;
        }
      }
    });
  }
  return y;
}

// log-probability of ids[i] under softmax(logits[i, lo:hi] * inv_temp), the
// temperature-scaled distribution restricted to the vocab range [lo, hi).
template <class T>
TensorT<T> masked_logprob(TapeT<T>* tape, TensorT<T> logits,
                          const std::vector<int>& ids, T inv_temp, int lo, int hi) {
  check(logits.rank() == 2, "masked_logprob: logits must be [N,V]");
  int N = logits.dim(0), V = logits.dim(1);
  check(lo >= 0 && hi <= V && lo < hi, "masked_logprob: bad vocab range");
  check(static_cast<int>(ids.size()) == N, "masked_logprob: ids length mismatch");
  TensorT<T> y = TensorT<T>::zeros({N});
  const auto& zv = logits.data();
  auto& yv = y.data();
  for (int i = 0; i < N; ++i) {
    check(ids[i] >= lo && ids[i] < hi,
          "masked_logprob: id " + std::to_string(ids[i]) + " outside [" +
              std::to_string(lo) + "," + std::to_string(hi) + ")");
    const T* z = zv.data() + static_cast<size_t>(i) * V;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = lo; j < hi; ++j) mx = std::max(mx, z[j] * inv_temp);
    T lse = T(0);
    for (int j = lo; j < hi; ++j) lse += std::exp(z[j] * inv_temp - mx);
    lse = std::log(lse) + mx;
    yv[i] = z[ids[i]] * inv_temp - lse;
  }
  if (detail::want_grad(tape, {&logits})) {
    y.set_requires_grad(true);
    auto zn = logits.node(), yn = y.node();
    auto ids_c = ids;
    tape->record([zn, yn, ids_c, N, V, inv_temp, lo, hi] {
      if (yn->grad.empty()) return;
      zn->ensure_grad();
      for (int i = 0; i < N; ++i) {
        T g = yn->grad[i];
        if (g == T(0)) continue;
        const T* z = zn->value.data() + static_cast<size_t>(i) * V;
        T* dz = zn->grad.data() + static_cast<size_t>(i) * V;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = lo; j < hi; ++j) mx = std::max(mx, z[j] * inv_temp);
        T sum = T(0);
        for (int j = lo; j < hi; ++j) sum += std::exp(z[j] * inv_temp - mx);
        T zinv = T(1) / sum;
        for (int j = lo; j < hi; ++j) {
          T p = std::exp(z[j] * inv_temp - mx) * zinv;
          dz[j] -= g * inv_temp * p;
        }
        dz[ids_c[i]] += g * inv_temp;
      }
    });
  }
  return y;
}

// exact categorical KL(p || q) per row over the restricted, temperature-scaled
// distributions; gradient flows into logits_p only (q is a frozen reference).
template <class T>
TensorT<T> masked_kl(TapeT<T>* tape, TensorT<T> logits_p,
                     const TensorT<T>& logits_q, T inv_temp, int lo, int hi) {
  check(logits_p.shape() == logits_q.shape(),
        "masked_kl: shape mismatch " + shape_str(logits_p.shape()) + " vs " +
            shape_str(logits_q.shape()));
  check(logits_p.rank() == 2, "masked_kl: logits must be [N,V]");
  int N = logits_p.dim(0), V = logits_p.dim(1);
  check(lo >= 0 && hi <= V && lo < hi, "masked_kl: bad vocab range");
  int W = hi - lo;
  TensorT<T> y = TensorT<T>::zeros({N});
  auto logp = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * W);
  auto logq = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * W);
  auto log_softmax_row = [&](const T* z, T* out) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < W; ++j) mx = std::max(mx, z[lo + j] * inv_temp);
    T lse = T(0);
    for (int j = 0; j < W; ++j) lse += std::exp(z[lo + j] * inv_temp - mx);
    lse = std::log(lse) + mx;
    for (int j = 0; j < W; ++j) out[j] = z[lo + j] * inv_temp - lse;
  };
  auto& yv = y.data();
  for (int i = 0; i < N; ++i) {
    T* lp = logp->data() + static_cast<size_t>(i) * W;
    T* lq = logq->data() + static_cast<size_t>(i) * W;
    log_softmax_row(logits_p.data().data() + static_cast<size_t>(i) * V, lp);
    log_softmax_row(logits_q.data().data() + static_cast<size_t>(i) * V, lq);
    T kl = T(0);
    for (int j = 0; j < W; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
    yv[i] = kl;
  }
  if (detail::want_grad(tape, {&logits_p})) {
    y.set_requires_grad(true);
    auto pn = logits_p.node(), yn = y.node();
    tape->record([pn, yn, logp, logq, N, W, lo, inv_temp] {
      if (yn->grad.empty()) return;
      pn->ensure_grad();
      int V = static_cast<int>(pn->value.size()) / N;
      for (int i = 0; i < N; ++i) {
        T g = yn->grad[i];
        if (g == T(0)) continue;
        const T* lp = logp->data() + static_cast<size_t>(i) * W;
        const T* lq = logq->data() + static_cast<size_t>(i) * W;
        T kl = yn->value[i];
        T* dz = pn->grad.data() + static_cast<size_t>(i) * V;
        for (int j = 0; j < W; ++j) {
          T p = std::exp(lp[j]);
          dz[lo + j] += g * inv_temp * p * (lp[j] - lq[j] - kl);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions (single image, NCHW without the batch axis)
// ---------------------------------------------------------------------------

// x [C,H,W], w [O,C,kh,kw], b [O] -> y [O,Ho,Wo]
template <class T>
TensorT<T> conv2d(TapeT<T>* tape, TensorT<T> x, TensorT<T> w, TensorT<T> b,
                  int stride, int pad) {
  check(x.rank() == 3 && w.rank() == 4, "conv2d: expected x[C,H,W], w[O,C,kh,kw]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == C, "conv2d: channel mismatch x" + shape_str(x.shape()) +
                           " w" + shape_str(w.shape()));
  check(b.rank() == 1 && b.dim(0) == O, "conv2d: bias shape mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho > 0 && Wo > 0, "conv2d: empty output");
  int ckk = C * kh * kw;
  int hw = Ho * Wo;
  // im2col
  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(hw) * ckk, T(0));
  const auto& xv = x.data();
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      T* dst = col->data() + (static_cast<size_t>(oy) * Wo + ox) * ckk;
      for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int iy = oy * stride - pad + ky;
            int ix = ox * stride - pad + kx;
            T v = T(0);
            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
              v = xv[(static_cast<size_t>(c) * H + iy) * W + ix];
            dst[(static_cast<size_t>(c) * kh + ky) * kw + kx] = v;
          }
    }
  // out_t [hw, O] = col [hw, ckk] * w_flat[O, ckk]^T
  std::vector<T> out_t(static_cast<size_t>(hw) * O, T(0));
  detail::gemm_nt(hw, ckk, O, col->data(), w.data().data(), out_t.data());
  TensorT<T> y = TensorT<T>::zeros({O, Ho, Wo});
  auto& yv = y.data();
  const auto& bv = b.data();
  for (int o = 0; o < O; ++o)
    for (int p = 0; p < hw; ++p)
      yv[static_cast<size_t>(o) * hw + p] = out_t[static_cast<size_t>(p) * O + o] + bv[o];
  if (detail::want_grad(tape, {&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    tape->record([xn, wn, bn, yn, col, C, H, W, O, kh, kw, Ho, Wo, stride, pad,
                  ckk, hw] {
      if (yn->grad.empty()) return;
      // g_t [hw, O]
      std::vector<T> g_t(static_cast<size_t>(hw) * O);
      for (int o = 0; o < O; ++o)
        for (int p = 0; p < hw; ++p)
          g_t[static_cast<size_t>(p) * O + o] = yn->grad[static_cast<size_t>(o) * hw + p];
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int o = 0; o < O; ++o) {
          T acc = T(0);
          for (int p = 0; p < hw; ++p) acc += g_t[static_cast<size_t>(p) * O + o];
          bn->grad[o] += acc;
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm_tn(O, hw, ckk, g_t.data(), col->data(), wn->grad.data());
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<T> dcol(static_cast<size_t>(hw) * ckk, T(0));
        detail::gemm_nn(hw, O, ckk, g_t.data(), wn->value.data(), dcol.data());
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const T* src = dcol.data() + (static_cast<size_t>(oy) * Wo + ox) * ckk;
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  int iy = oy * stride - pad + ky;
                  int ix = ox * stride - pad + kx;
                  if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                    xn->grad[(static_cast<size_t>(c) * H + iy) * W + ix] +=
                        src[(static_cast<size_t>(c) * kh + ky) * kw + kx];
                }
          }
      }
    });
  }
  return y;
}

// x [C,H,W], w [C,O,kh,kw], b [O] -> y [O,Ho,Wo], Ho = (H-1)*stride - 2*pad + kh
template <class T>
TensorT<T> conv2d_transpose(TapeT<T>* tape, TensorT<T> x, TensorT<T> w,
                            TensorT<T> b, int stride, int pad) {
  check(x.rank() == 3 && w.rank() == 4,
        "conv2d_transpose: expected x[C,H,W], w[C,O,kh,kw]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int O = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(0) == C, "conv2d_transpose: channel mismatch x" +
                           shape_str(x.shape()) + " w" + shape_str(w.shape()));
  check(b.rank() == 1 && b.dim(0) == O, "conv2d_transpose: bias shape mismatch");
  int Ho = (H - 1) * stride - 2 * pad + kh;
  int Wo = (W - 1) * stride - 2 * pad + kw;
  check(Ho > 0 && Wo > 0, "conv2d_transpose: empty output");
  TensorT<T> y = TensorT<T>::zeros({O, Ho, Wo});
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& yv = y.data();
  const auto& bv = b.data();
  for (int o = 0; o < O; ++o)
    std::fill_n(yv.data() + static_cast<size_t>(o) * Ho * Wo, Ho * Wo, bv[o]);
  for (int c = 0; c < C; ++c)
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix) {
        T v = xv[(static_cast<size_t>(c) * H + iy) * W + ix];
        if (v == T(0)) continue;
        for (int o = 0; o < O; ++o) {
          const T* wk = wv.data() + ((static_cast<size_t>(c) * O + o) * kh) * kw;
          T* yp = yv.data() + static_cast<size_t>(o) * Ho * Wo;
          for (int ky = 0; ky < kh; ++ky) {
            int oy = iy * stride - pad + ky;
            if (oy < 0 || oy >= Ho) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ox = ix * stride - pad + kx;
              if (ox < 0 || ox >= Wo) continue;
              yp[static_cast<size_t>(oy) * Wo + ox] += v * wk[static_cast<size_t>(ky) * kw + kx];
            }
          }
        }
      }
  if (detail::want_grad(tape, {&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    tape->record([xn, wn, bn, yn, C, H, W, O, kh, kw, Ho, Wo, stride, pad] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int o = 0; o < O; ++o) {
          T acc = T(0);
          const T* gp = g.data() + static_cast<size_t>(o) * Ho * Wo;
          for (int p = 0; p < Ho * Wo; ++p) acc += gp[p];
          bn->grad[o] += acc;
        }
      }
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix) {
            T xval = xn->value[(static_cast<size_t>(c) * H + iy) * W + ix];
            T dx = T(0);
            for (int o = 0; o < O; ++o) {
              const T* wk = wn->value.data() + ((static_cast<size_t>(c) * O + o) * kh) * kw;
              T* dwk = wn->requires_grad
                           ? wn->grad.data() + ((static_cast<size_t>(c) * O + o) * kh) * kw
                           : nullptr;
              const T* gp = g.data() + static_cast<size_t>(o) * Ho * Wo;
              for (int ky = 0; ky < kh; ++ky) {
                int oy = iy * stride - pad + ky;
                if (oy < 0 || oy >= Ho) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ox = ix * stride - pad + kx;
                  if (ox < 0 || ox >= Wo) continue;
                  T gv = gp[static_cast<size_t>(oy) * Wo + ox];
                  dx += gv * wk[static_cast<size_t>(ky) * kw + kx];
                  if (dwk) dwk[static_cast<size_t>(ky) * kw + kx] += gv * xval;
                }
              }
            }
            if (xn->requires_grad)
              xn->grad[(static_cast<size_t>(c) * H + iy) * W + ix] += dx;
          }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Adam optimizer with bias correction; gradients are zeroed after the update.
// ---------------------------------------------------------------------------

template <class T>
struct NamedParamT {
  std::string name;
  TensorT<T> tensor;
};

using NamedParam = NamedParamT<float>;

template <class T>
struct AdamT {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  int64_t step_count = 0;
  std::vector<std::vector<T>> m, v;

  void init(const std::vector<NamedParamT<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), T(0));
      v.emplace_back(p.tensor.numel(), T(0));
    }
    step_count = 0;
  }

  void step(std::vector<NamedParamT<T>>& params) {
    check(m.size() == params.size(), "adam: state/param count mismatch");
    ++step_count;
    T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
    T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      check(p.tensor.grad_allocated(),
            "adam: missing gradient for parameter '" + p.name + "'");
      auto& val = p.tensor.data();
      auto& g = p.tensor.grad();
      auto& mi = m[pi];
      auto& vi = v[pi];
      check(mi.size() == val.size(), "adam: moment shape mismatch for '" + p.name + "'");
      for (size_t i = 0; i < val.size(); ++i) {
        mi[i] = beta1 * mi[i] + (T(1) - beta1) * g[i];
        vi[i] = beta2 * vi[i] + (T(1) - beta2) * g[i] * g[i];
        T mhat = mi[i] / bc1;
        T vhat = vi[i] / bc2;
        val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p.tensor.zero_grad();
    }
  }
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// Finite-difference gradient check (64-bit). Returns the max over coordinates
// of |analytic - central| / (|central| + 1e-8).
// ---------------------------------------------------------------------------

inline double grad_check(
    const std::function<Tensor64(Tape64*, Tensor64)>& f, Tensor64 point,
    double h = 1e-5) {
  Tensor64 x = point.detached_copy();
  x.set_requires_grad(true);
  Tape64 tape;
  Tensor64 loss = f(&tape, x);
  check(loss.numel() == 1, "grad_check: f must be scalar-valued");
  tape.backward(loss);
  std::vector<double> analytic = x.grad();

  double worst = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor64 xp = point.detached_copy();
    xp.data()[i] += h;
    Tensor64 xm = point.detached_copy();
    xm.data()[i] -= h;
    double fp = f(nullptr, xp).item();
    double fm = f(nullptr, xm).item();
    double numeric = (fp - fm) / (2.0 * h);
    double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace flowgen
