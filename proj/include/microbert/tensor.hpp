#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "microbert/rng.hpp"

namespace microbert {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void op_check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Gradient recording is on by default; NoGradGuard turns it off for the
// current scope (validation, decoding).
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until touched; then same length as value
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Value-semantic handle onto a node of the computation graph. Copying a
// TensorT shares the underlying storage.
template <class T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(static_cast<size_t>(numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    op_check(numel(shape) == static_cast<int64_t>(data.size()),
             "tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                 shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }

  static TensorT randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.data()) x = static_cast<T>(rng.next_gauss()) * stddev;
    return t;
  }

  static TensorT rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.data()) x = static_cast<T>(rng.next_uniform(lo, hi));
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t size() const { return n_->size(); }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t rank() const { return n_->shape.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const char* op() const { return n_->op; }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& grad() { return n_->grad_buf(); }
  bool has_grad() const { return !n_->grad.empty(); }

  T item() const {
    op_check(size() == 1, "item: tensor has " + std::to_string(size()) + " elements");
    return n_->value[0];
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

template <class T>
TensorT<T> make_result(Shape shape, const char* op, std::vector<TensorT<T>> parents) {
  auto n = std::make_shared<TensorNode<T>>();
  n->value.assign(static_cast<size_t>(numel(shape)), T(0));
  n->shape = std::move(shape);
  n->op = op;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
  }
  return TensorT<T>(std::move(n));
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;
template <class T>
using EStrideMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ECStrideMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

// rows of a tensor viewed as a [numel/last, last] matrix
inline int64_t collapsed_rows(const Shape& s, const char* op) {
  op_check(!s.empty(), std::string(op) + ": expected rank >= 1");
  return numel(s) / s.back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  op_check(a.shape() == b.shape(),
           "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), "add", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      for (int pi = 0; pi < 2; ++pi) {
        auto& p = n.parents[pi];
        if (!p->requires_grad) continue;
        auto& pg = p->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  op_check(a.shape() == b.shape(),
           "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), "sub", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      if (n.parents[0]->requires_grad) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
      if (n.parents[1]->requires_grad) {
        auto& pg = n.parents[1]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] -= n.grad[i];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  op_check(a.shape() == b.shape(),
           "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = detail::make_result<T>(a.shape(), "mul", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      const auto& av = n.parents[0]->value;
      const auto& bv = n.parents[1]->value;
      if (n.parents[0]->requires_grad) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * bv[i];
      }
      if (n.parents[1]->requires_grad) {
        auto& pg = n.parents[1]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * av[i];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  auto out = detail::make_result<T>(a.shape(), "scale", {a});
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (out.requires_grad()) {
    out.node()->backward_fn = [c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * c;
    };
  }
  return out;
}

// multiply every element by a learnable scalar tensor
template <class T>
TensorT<T> scale_by(const TensorT<T>& a, const TensorT<T>& s) {
  op_check(s.size() == 1, "scale_by: scale must be a scalar, got " + shape_str(s.shape()));
  auto out = detail::make_result<T>(a.shape(), "scale_by", {a, s});
  const T sv = s.data()[0];
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * sv;
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      const auto& av = n.parents[0]->value;
      const T sv = n.parents[1]->value[0];
      if (n.parents[0]->requires_grad) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * sv;
      }
      if (n.parents[1]->requires_grad) {
        T acc = 0;
        for (size_t i = 0; i < av.size(); ++i) acc += n.grad[i] * av[i];
        n.parents[1]->grad_buf()[0] += acc;
      }
    };
  }
  return out;
}

// x[..., c] + b[c]
template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b) {
  op_check(b.rank() == 1 && !x.shape().empty() && b.dim(0) == x.shape().back(),
           "add_bias: bias " + shape_str(b.shape()) + " does not match last dim of " +
               shape_str(x.shape()));
  auto out = detail::make_result<T>(x.shape(), "add_bias", {x, b});
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "add_bias");
  const auto& xv = x.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + bv[j];
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (n.parents[0]->requires_grad) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
      if (n.parents[1]->requires_grad) {
        auto& bg = n.parents[1]->grad_buf();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) bg[j] += n.grad[i * c + j];
      }
    };
  }
  return out;
}

// x[r, c] + v[r]
template <class T>
TensorT<T> add_colvec(const TensorT<T>& x, const TensorT<T>& v) {
  op_check(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.dim(0),
           "add_colvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  auto out = detail::make_result<T>(x.shape(), "add_colvec", {x, v});
  const int64_t r = x.dim(0), c = x.dim(1);
  const auto& xv = x.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + vv[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (n.parents[0]->requires_grad) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
      if (n.parents[1]->requires_grad) {
        auto& vg = n.parents[1]->grad_buf();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) vg[i] += n.grad[i * c + j];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix products (leading dims of a are collapsed)

// a[..., k] @ w[k, m] -> [..., m]
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& w) {
  op_check(w.rank() == 2 && !a.shape().empty() && a.shape().back() == w.dim(0),
           "matmul: cannot multiply " + shape_str(a.shape()) + " @ " + shape_str(w.shape()));
  const int64_t k = w.dim(0), m = w.dim(1);
  const int64_t r = detail::collapsed_rows(a.shape(), "matmul");
  Shape out_shape(a.shape());
  out_shape.back() = m;
  auto out = detail::make_result<T>(std::move(out_shape), "matmul", {a, w});
  detail::ECMap<T> am(a.data().data(), r, k);
  detail::ECMap<T> wm(w.data().data(), k, m);
  detail::EMap<T> om(out.data().data(), r, m);
  om.noalias() = am * wm;
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, k, m](TensorNode<T>& n) {
      detail::ECMap<T> gm(n.grad.data(), r, m);
      detail::ECMap<T> am(n.parents[0]->value.data(), r, k);
      detail::ECMap<T> wm(n.parents[1]->value.data(), k, m);
      if (n.parents[0]->requires_grad) {
        detail::EMap<T> ag(n.parents[0]->grad_buf().data(), r, k);
        ag.noalias() += gm * wm.transpose();
      }
      if (n.parents[1]->requires_grad) {
        detail::EMap<T> wg(n.parents[1]->grad_buf().data(), k, m);
        wg.noalias() += am.transpose() * gm;
      }
    };
  }
  return out;
}

// a[..., k] @ w[m, k]^T -> [..., m]
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& w) {
  op_check(w.rank() == 2 && !a.shape().empty() && a.shape().back() == w.dim(1),
           "matmul_nt: cannot multiply " + shape_str(a.shape()) + " @ " + shape_str(w.shape()) +
               "^T");
  const int64_t k = w.dim(1), m = w.dim(0);
  const int64_t r = detail::collapsed_rows(a.shape(), "matmul_nt");
  Shape out_shape(a.shape());
  out_shape.back() = m;
  auto out = detail::make_result<T>(std::move(out_shape), "matmul_nt", {a, w});
  detail::ECMap<T> am(a.data().data(), r, k);
  detail::ECMap<T> wm(w.data().data(), m, k);
  detail::EMap<T> om(out.data().data(), r, m);
  om.noalias() = am * wm.transpose();
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, k, m](TensorNode<T>& n) {
      detail::ECMap<T> gm(n.grad.data(), r, m);
      detail::ECMap<T> am(n.parents[0]->value.data(), r, k);
      detail::ECMap<T> wm(n.parents[1]->value.data(), m, k);
      if (n.parents[0]->requires_grad) {
        detail::EMap<T> ag(n.parents[0]->grad_buf().data(), r, k);
        ag.noalias() += gm * wm;
      }
      if (n.parents[1]->requires_grad) {
        detail::EMap<T> wg(n.parents[1]->grad_buf().data(), m, k);
        wg.noalias() += gm.transpose() * am;
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(const TensorT<T>& x) {
  op_check(x.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(x.shape()));
  const int64_t r = x.dim(0), c = x.dim(1);
  auto out = detail::make_result<T>({c, r}, "transpose2d", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) ov[j * r + i] = xv[i * c + j];
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) pg[i * c + j] += n.grad[j * r + i];
    };
  }
  return out;
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  op_check(numel(shape) == x.size(),
           "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = detail::make_result<T>(std::move(shape), "reshape", {x});
  out.data() = x.data();
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities

namespace detail {
template <class T, class F, class DF>
TensorT<T> unary_op(const TensorT<T>& x, const char* name, F f, DF df) {
  auto out = make_result<T>(x.shape(), name, {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(xv[i]);
  if (out.requires_grad()) {
    out.node()->backward_fn = [df](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      const auto& xv = n.parents[0]->value;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * df(xv[i], n.value[i]);
    };
  }
  return out;
}
}  // namespace detail

template <class T>
TensorT<T> tanh_op(const TensorT<T>& x) {
  return detail::unary_op(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return detail::unary_op(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return detail::unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// exact gelu: 0.5 x (1 + erf(x / sqrt(2)))
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      x, "gelu",
      [=](T v) { return static_cast<T>(0.5 * double(v) * (1.0 + std::erf(double(v) * inv_sqrt2))); },
      [=](T v, T) {
        double d = double(v);
        return static_cast<T>(0.5 * (1.0 + std::erf(d * inv_sqrt2)) +
                              d * inv_sqrt2pi * std::exp(-0.5 * d * d));
      });
}

// ---------------------------------------------------------------------------
// softmax family (all over the last dim, numerically stable)

template <class T>
TensorT<T> softmax(const TensorT<T>& x) {
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "softmax");
  auto out = detail::make_result<T>(x.shape(), "softmax", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T* orow = ov.data() + i * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int64_t j = 0; j < c; ++j) orow[j] /= sum;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i) {
        const T* y = n.value.data() + i * c;
        const T* g = n.grad.data() + i * c;
        T dot = 0;
        for (int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
        for (int64_t j = 0; j < c; ++j) pg[i * c + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> log_sum_exp(const TensorT<T>& x) {
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "log_sum_exp");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto out = detail::make_result<T>(std::move(out_shape), "log_sum_exp", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    ov[i] = mx + std::log(sum);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      const auto& xv = n.parents[0]->value;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          pg[i * c + j] += n.grad[i] * std::exp(xv[i * c + j] - n.value[i]);
    };
  }
  return out;
}

// per-row cross entropy of softmax(logits) against integer targets
template <class T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int32_t>& targets) {
  const int64_t c = logits.shape().back();
  const int64_t r = detail::collapsed_rows(logits.shape(), "softmax_cross_entropy");
  op_check(static_cast<int64_t>(targets.size()) == r,
           "softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
               std::to_string(r) + " rows");
  for (int32_t t : targets)
    op_check(t >= 0 && t < c, "softmax_cross_entropy: target " + std::to_string(t) +
                                  " out of range [0," + std::to_string(c) + ")");
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  auto out = detail::make_result<T>(std::move(out_shape), "softmax_cross_entropy", {logits});
  const auto& xv = logits.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    ov[i] = (mx + std::log(sum)) - row[targets[i]];
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c, targets](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      const auto& xv = n.parents[0]->value;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i) {
        const T* row = xv.data() + i * c;
        T mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const T g = n.grad[i];
        for (int64_t j = 0; j < c; ++j) {
          T p = std::exp(row[j] - mx) / sum;
          pg[i * c + j] += g * (p - (j == targets[i] ? T(1) : T(0)));
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer normalization over the last dim

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
  const int64_t c = x.shape().back();
  op_check(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
           "layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
               shape_str(beta.shape()) + " do not match last dim of " + shape_str(x.shape()));
  const int64_t r = detail::collapsed_rows(x.shape(), "layer_norm");
  auto out = detail::make_result<T>(x.shape(), "layer_norm", {x, gamma, beta});
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (int64_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T inv = T(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) ov[i * c + j] = gv[j] * ((row[j] - mean) * inv) + bv[j];
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c, eps](TensorNode<T>& n) {
      const auto& xv = n.parents[0]->value;
      const auto& gv = n.parents[1]->value;
      std::vector<T> xhat(static_cast<size_t>(c));
      for (int64_t i = 0; i < r; ++i) {
        const T* row = xv.data() + i * c;
        const T* g = n.grad.data() + i * c;
        T mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<T>(c);
        T var = 0;
        for (int64_t j = 0; j < c; ++j) {
          T d = row[j] - mean;
          var += d * d;
        }
        var /= static_cast<T>(c);
        T inv = T(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < c; ++j) xhat[j] = (row[j] - mean) * inv;
        if (n.parents[1]->requires_grad) {
          auto& gg = n.parents[1]->grad_buf();
          for (int64_t j = 0; j < c; ++j) gg[j] += g[j] * xhat[j];
        }
        if (n.parents[2]->requires_grad) {
          auto& bg = n.parents[2]->grad_buf();
          for (int64_t j = 0; j < c; ++j) bg[j] += g[j];
        }
        if (n.parents[0]->requires_grad) {
          auto& pg = n.parents[0]->grad_buf();
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (int64_t j = 0; j < c; ++j) {
            T dxh = g[j] * gv[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
          }
          mean_dxhat /= static_cast<T>(c);
          mean_dxhat_xhat /= static_cast<T>(c);
          for (int64_t j = 0; j < c; ++j) {
            T dxh = g[j] * gv[j];
            pg[i * c + j] += inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// gathers, slices, segments

// table[v, h] indexed by ids -> [lead..., h]
template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int32_t>& ids, Shape lead_shape) {
  op_check(table.rank() == 2, "embedding: table must be rank 2, got " + shape_str(table.shape()));
  op_check(numel(lead_shape) == static_cast<int64_t>(ids.size()),
           "embedding: id count does not match output shape");
  const int64_t v = table.dim(0), h = table.dim(1);
  for (int32_t id : ids)
    op_check(id >= 0 && id < v,
             "embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  lead_shape.push_back(h);
  auto out = detail::make_result<T>(std::move(lead_shape), "embedding", {table});
  const auto& tv = table.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<int64_t>(ids[i]) * h, h, ov.data() + i * h);
  if (out.requires_grad()) {
    out.node()->backward_fn = [ids, h](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = pg.data() + static_cast<int64_t>(ids[i]) * h;
        const T* src = n.grad.data() + i * h;
        for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int32_t>& ids) {
  return embedding(table, ids, Shape{static_cast<int64_t>(ids.size())});
}

// gather rows of x viewed as [rows, last]; indices may repeat
template <class T>
TensorT<T> select_rows(const TensorT<T>& x, const std::vector<int64_t>& idx) {
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "select_rows");
  for (int64_t i : idx)
    op_check(i >= 0 && i < r,
             "select_rows: row " + std::to_string(i) + " out of range [0," + std::to_string(r) + ")");
  auto out =
      detail::make_result<T>({static_cast<int64_t>(idx.size()), c}, "select_rows", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(xv.data() + idx[i] * c, c, ov.data() + i * c);
  if (out.requires_grad()) {
    out.node()->backward_fn = [idx, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < idx.size(); ++i) {
        T* dst = pg.data() + idx[i] * c;
        const T* src = n.grad.data() + i * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

// contiguous column slice of a rank-2 tensor
template <class T>
TensorT<T> slice_cols(const TensorT<T>& x, int64_t start, int64_t len) {
  op_check(x.rank() == 2, "slice_cols: expected rank 2, got " + shape_str(x.shape()));
  const int64_t r = x.dim(0), c = x.dim(1);
  op_check(start >= 0 && len > 0 && start + len <= c,
           "slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + len) +
               ") out of " + std::to_string(c) + " columns");
  auto out = detail::make_result<T>({r, len}, "slice_cols", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i)
    std::copy_n(xv.data() + i * c + start, len, ov.data() + i * len);
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c, start, len](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < len; ++j) pg[i * c + start + j] += n.grad[i * len + j];
    };
  }
  return out;
}

// mean over contiguous row segments of x viewed as [rows, last]
template <class T>
TensorT<T> segment_mean(const TensorT<T>& x,
                        const std::vector<std::pair<int64_t, int64_t>>& segments) {
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "segment_mean");
  for (const auto& [b, l] : segments)
    op_check(b >= 0 && l > 0 && b + l <= r, "segment_mean: segment [" + std::to_string(b) + "," +
                                                std::to_string(b + l) + ") out of " +
                                                std::to_string(r) + " rows");
  auto out = detail::make_result<T>({static_cast<int64_t>(segments.size()), c}, "segment_mean",
                                    {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto [b, l] = segments[s];
    T* dst = ov.data() + s * c;
    for (int64_t i = 0; i < l; ++i) {
      const T* src = xv.data() + (b + i) * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    const T inv = T(1) / static_cast<T>(l);
    for (int64_t j = 0; j < c; ++j) dst[j] *= inv;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [segments, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t s = 0; s < segments.size(); ++s) {
        const auto [b, l] = segments[s];
        const T inv = T(1) / static_cast<T>(l);
        const T* src = n.grad.data() + s * c;
        for (int64_t i = 0; i < l; ++i) {
          T* dst = pg.data() + (b + i) * c;
          for (int64_t j = 0; j < c; ++j) dst[j] += src[j] * inv;
        }
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  op_check(!parts.empty(), "concat_rows: empty input list");
  const int64_t c = parts[0].shape().back();
  int64_t rows = 0;
  for (const auto& p : parts) {
    op_check(p.rank() == 2 && p.dim(1) == c,
             "concat_rows: inconsistent shape " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  auto out = detail::make_result<T>({rows, c}, "concat_rows", parts);
  auto& ov = out.data();
  int64_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), ov.begin() + at);
    at += p.size();
  }
  if (out.requires_grad()) {
    std::vector<int64_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.size());
    out.node()->backward_fn = [sizes](TensorNode<T>& n) {
      int64_t at = 0;
      for (size_t pi = 0; pi < n.parents.size(); ++pi) {
        if (n.parents[pi]->requires_grad) {
          auto& pg = n.parents[pi]->grad_buf();
          for (int64_t i = 0; i < sizes[pi]; ++i) pg[i] += n.grad[at + i];
        }
        at += sizes[pi];
      }
    };
  }
  return out;
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  op_check(!parts.empty(), "concat_cols: empty input list");
  const int64_t r = parts[0].dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    op_check(p.rank() == 2 && p.dim(0) == r,
             "concat_cols: inconsistent shape " + shape_str(p.shape()));
    cols += p.dim(1);
  }
  auto out = detail::make_result<T>({r, cols}, "concat_cols", parts);
  auto& ov = out.data();
  int64_t at = 0;
  for (const auto& p : parts) {
    const int64_t pc = p.dim(1);
    for (int64_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * pc, pc, ov.data() + i * cols + at);
    at += pc;
  }
  if (out.requires_grad()) {
    std::vector<int64_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    out.node()->backward_fn = [r, cols, widths](TensorNode<T>& n) {
      int64_t at = 0;
      for (size_t pi = 0; pi < n.parents.size(); ++pi) {
        const int64_t pc = widths[pi];
        if (n.parents[pi]->requires_grad) {
          auto& pg = n.parents[pi]->grad_buf();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < pc; ++j) pg[i * pc + j] += n.grad[i * cols + at + j];
        }
        at += pc;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  auto out = detail::make_result<T>(Shape{}, "sum_all", {x});
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward_fn = [](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      const T g = n.grad[0];
      for (auto& v : pg) v += g;
    };
  }
  return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  op_check(x.size() > 0, "mean_all: empty tensor");
  auto out = detail::make_result<T>(Shape{}, "mean_all", {x});
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.data()[0] = acc / static_cast<T>(x.size());
  if (out.requires_grad()) {
    const T inv = T(1) / static_cast<T>(x.size());
    out.node()->backward_fn = [inv](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      const T g = n.grad[0] * inv;
      for (auto& v : pg) v += g;
    };
  }
  return out;
}

// sum over the last dim
template <class T>
TensorT<T> rowsum(const TensorT<T>& x) {
  const int64_t c = x.shape().back();
  const int64_t r = detail::collapsed_rows(x.shape(), "rowsum");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto out = detail::make_result<T>(std::move(out_shape), "rowsum", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    T acc = 0;
    for (int64_t j = 0; j < c; ++j) acc += xv[i * c + j];
    ov[i] = acc;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [r, c](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) pg[i * c + j] += n.grad[i];
    };
  }
  return out;
}

// sum of x at flat indices (indices may repeat)
template <class T>
TensorT<T> gather_sum(const TensorT<T>& x, const std::vector<int64_t>& idx) {
  for (int64_t i : idx)
    op_check(i >= 0 && i < x.size(), "gather_sum: index " + std::to_string(i) +
                                         " out of range [0," + std::to_string(x.size()) + ")");
  auto out = detail::make_result<T>(Shape{}, "gather_sum", {x});
  T acc = 0;
  for (int64_t i : idx) acc += x.data()[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward_fn = [idx](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      const T g = n.grad[0];
      for (int64_t i : idx) pg[i] += g;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout (inverted: scaled at train time, identity at eval)

template <class T>
TensorT<T> dropout(const TensorT<T>& x, T rate, uint64_t seed) {
  if (rate <= T(0)) return x;
  op_check(rate < T(1), "dropout: rate must be < 1");
  auto out = detail::make_result<T>(x.shape(), "dropout", {x});
  const T keep = T(1) - rate;
  const T inv = T(1) / keep;
  Rng rng(seed);
  std::vector<T> mask(x.data().size());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) {
    mask[i] = rng.next_bernoulli(double(keep)) ? inv : T(0);
    ov[i] = xv[i] * mask[i];
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [mask = std::move(mask)](TensorNode<T>& n) {
      if (!n.parents[0]->requires_grad) return;
      auto& pg = n.parents[0]->grad_buf();
      for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i] * mask[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// fused multi-head self-attention on a padded batch
//
// q, k, v: [batch, time, hidden] already projected. lengths gives the true
// length per batch item; key positions beyond it are masked out and padded
// query rows produce zeros. Attention probabilities are recomputed during the
// backward pass instead of stored, and dropout masks are replayed from the
// seed, so memory stays linear in the input size.

namespace detail {

// softmax(Q K^T * scale) for one (batch, head) pair of a [batch,time,hidden]
// block; optionally applies the dropout mask derived from seed/(b,h)
template <class T>
void attention_probs(const T* qd, const T* kd, int64_t b, int64_t h, int64_t tb, int64_t time,
                     int64_t hidden, int64_t dh, T att_scale, T attn_dropout,
                     uint64_t dropout_seed, bool apply_dropout, EMat<T>& probs) {
  ECStrideMap<T> Q(qd + b * time * hidden + h * dh, tb, dh, Eigen::OuterStride<>(hidden));
  ECStrideMap<T> K(kd + b * time * hidden + h * dh, tb, dh, Eigen::OuterStride<>(hidden));
  probs.resize(tb, tb);
  probs.noalias() = Q * K.transpose();
  probs *= att_scale;
  for (int64_t i = 0; i < tb; ++i) {
    T mx = probs(i, 0);
    for (int64_t j = 1; j < tb; ++j) mx = std::max(mx, probs(i, j));
    T sum = 0;
    for (int64_t j = 0; j < tb; ++j) {
      probs(i, j) = std::exp(probs(i, j) - mx);
      sum += probs(i, j);
    }
    for (int64_t j = 0; j < tb; ++j) probs(i, j) /= sum;
  }
  if (apply_dropout && attn_dropout > T(0)) {
    Rng rng(Rng::mix(dropout_seed, static_cast<uint64_t>(b), static_cast<uint64_t>(h)));
    const T keep = T(1) - attn_dropout;
    const T inv = T(1) / keep;
    for (int64_t i = 0; i < tb; ++i)
      for (int64_t j = 0; j < tb; ++j) probs(i, j) *= rng.next_bernoulli(double(keep)) ? inv : T(0);
  }
}

}  // namespace detail

template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                const std::vector<int64_t>& lengths, int64_t num_heads,
                                T attn_dropout = T(0), uint64_t dropout_seed = 0) {
  op_check(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
           "multi_head_attention: q/k/v must share shape [batch,time,hidden], got " +
               shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const int64_t batch = q.dim(0), time = q.dim(1), hidden = q.dim(2);
  op_check(hidden % num_heads == 0, "multi_head_attention: hidden " + std::to_string(hidden) +
                                        " not divisible by " + std::to_string(num_heads) +
                                        " heads");
  op_check(static_cast<int64_t>(lengths.size()) == batch,
           "multi_head_attention: lengths size mismatch");
  for (int64_t l : lengths)
    op_check(l >= 0 && l <= time, "multi_head_attention: invalid length " + std::to_string(l));
  const int64_t dh = hidden / num_heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  auto out = detail::make_result<T>(q.shape(), "multi_head_attention", {q, k, v});

  {
    const T* qd = q.data().data();
    const T* kd = k.data().data();
    const T* vd = v.data().data();
    T* od = out.data().data();
    detail::EMat<T> probs;
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t tb = lengths[b];
      if (tb == 0) continue;
      for (int64_t h = 0; h < num_heads; ++h) {
        detail::attention_probs(qd, kd, b, h, tb, time, hidden, dh, att_scale, attn_dropout,
                                dropout_seed, true, probs);
        detail::ECStrideMap<T> V(vd + b * time * hidden + h * dh, tb, dh,
                                 Eigen::OuterStride<>(hidden));
        detail::EStrideMap<T> O(od + b * time * hidden + h * dh, tb, dh,
                                Eigen::OuterStride<>(hidden));
        O.noalias() = probs * V;
      }
    }
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [batch, time, hidden, dh, num_heads, lengths, att_scale,
                               attn_dropout, dropout_seed](TensorNode<T>& n) {
      auto& qn = *n.parents[0];
      auto& kn = *n.parents[1];
      auto& vn = *n.parents[2];
      const T* qd = qn.value.data();
      const T* kd = kn.value.data();
      const T* vd = vn.value.data();
      detail::EMat<T> probs, probs_drop, dP, dS;
      for (int64_t b = 0; b < batch; ++b) {
        const int64_t tb = lengths[b];
        if (tb == 0) continue;
        for (int64_t h = 0; h < num_heads; ++h) {
          detail::attention_probs(qd, kd, b, h, tb, time, hidden, dh, att_scale, attn_dropout,
                                  dropout_seed, false, probs);
          probs_drop = probs;
          if (attn_dropout > T(0)) {
            Rng rng(Rng::mix(dropout_seed, static_cast<uint64_t>(b), static_cast<uint64_t>(h)));
            const T keep = T(1) - attn_dropout;
            const T inv = T(1) / keep;
            for (int64_t i = 0; i < tb; ++i)
              for (int64_t j = 0; j < tb; ++j)
                probs_drop(i, j) *= rng.next_bernoulli(double(keep)) ? inv : T(0);
          }
          const int64_t off = b * time * hidden + h * dh;
          detail::ECStrideMap<T> Q(qd + off, tb, dh, Eigen::OuterStride<>(hidden));
          detail::ECStrideMap<T> K(kd + off, tb, dh, Eigen::OuterStride<>(hidden));
          detail::ECStrideMap<T> V(vd + off, tb, dh, Eigen::OuterStride<>(hidden));
          detail::ECStrideMap<T> dO(n.grad.data() + off, tb, dh, Eigen::OuterStride<>(hidden));
          if (vn.requires_grad) {
            detail::EStrideMap<T> dV(vn.grad_buf().data() + off, tb, dh,
                                     Eigen::OuterStride<>(hidden));
            dV.noalias() += probs_drop.transpose() * dO;
          }
          if (!qn.requires_grad && !kn.requires_grad) continue;
          dP.noalias() = dO * V.transpose();
          if (attn_dropout > T(0)) {
            // replay the same mask: dP flows only through kept entries
            Rng rng(Rng::mix(dropout_seed, static_cast<uint64_t>(b), static_cast<uint64_t>(h)));
            const T keep = T(1) - attn_dropout;
            const T inv = T(1) / keep;
            for (int64_t i = 0; i < tb; ++i)
              for (int64_t j = 0; j < tb; ++j)
                dP(i, j) *= rng.next_bernoulli(double(keep)) ? inv : T(0);
          }
          dS.resize(tb, tb);
          for (int64_t i = 0; i < tb; ++i) {
            T dot = 0;
            for (int64_t j = 0; j < tb; ++j) dot += dP(i, j) * probs(i, j);
            for (int64_t j = 0; j < tb; ++j) dS(i, j) = probs(i, j) * (dP(i, j) - dot);
          }
          dS *= att_scale;
          if (qn.requires_grad) {
            detail::EStrideMap<T> dQ(qn.grad_buf().data() + off, tb, dh,
                                     Eigen::OuterStride<>(hidden));
            dQ.noalias() += dS * K;
          }
          if (kn.requires_grad) {
            detail::EStrideMap<T> dK(kn.grad_buf().data() + off, tb, dh,
                                     Eigen::OuterStride<>(hidden));
            dK.noalias() += dS.transpose() * Q;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reverse-mode sweep

template <class T>
std::vector<TensorNode<T>*> topo_order(TensorNode<T>* root) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  // iterative DFS; recursion would overflow on long LSTM chains
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

// Seeds d(root)/d(root) = 1 and accumulates gradients into every
// requires_grad tensor reachable from root. root must be a scalar.
template <class T>
void backward(const TensorT<T>& root) {
  op_check(root.size() == 1,
           "backward: root must be a scalar, got shape " + shape_str(root.shape()));
  op_check(root.requires_grad(), "backward: root does not require grad");
  auto order = topo_order(root.node().get());
  root.node()->grad_buf()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <class T>
void zero_grads(std::vector<TensorT<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

using Tensor = TensorT<float>;

}  // namespace microbert
