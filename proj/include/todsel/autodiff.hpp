// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over a dynamically recorded DAG of
// dense arrays. A Var is a handle to a graph node; ops build new nodes and
// capture backward closures. backward(loss) runs the closures in reverse
// topological order and accumulates into .grad buffers. Every op validates
// its output for NaN/Inf and throws NonFiniteError instead of propagating.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "todsel/array.hpp"
#include "todsel/rng.hpp"

namespace todsel::ts {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
MatMap<T> mat(Array<T>& a) {
  return MatMap<T>(a.data.data(), static_cast<Eigen::Index>(a.rows()),
                   static_cast<Eigen::Index>(a.cols()));
}
template <typename T>
ConstMatMap<T> mat(const Array<T>& a) {
  return ConstMatMap<T>(a.data.data(), static_cast<Eigen::Index>(a.rows()),
                        static_cast<Eigen::Index>(a.cols()));
}

inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

inline bool& grad_recording_flag() {
  thread_local bool on = true;
  return on;
}

// Disables graph recording inside a scope (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = prev_; }

 private:
  bool prev_;
};

template <typename T>
class Var;

template <typename T>
struct Node {
  Array<T> value;
  Array<T> grad;
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> backward_fn;
  bool requires_grad = false;
  bool is_param = false;
  bool has_grad = false;
  const char* op = "leaf";

  Array<T>& ensure_grad() {
    if (!has_grad) {
      grad = Array<T>::zeros(value.shape);
      has_grad = true;
    }
    return grad;
  }
  void zero_grad() {
    if (has_grad) std::fill(grad.data.begin(), grad.data.end(), T(0));
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(n_); }
  const Array<T>& val() const { return n_->value; }
  const Array<T>& grad() const { return n_->grad; }
  Array<T>& mutable_value() { return n_->value; }  // parameter updates only
  bool has_grad() const { return n_->has_grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool is_param() const { return n_ && n_->is_param; }
  T item() const { return n_->value.item(); }
  Node<T>* node() const { return n_.get(); }
  void zero_grad() const { n_->zero_grad(); }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
void check_finite(const Array<T>& a, const char* op) {
  if (finite_checks_flag().load(std::memory_order_relaxed) && !a.all_finite())
    throw NonFiniteError(std::string("non-finite values produced by op '") + op + "'");
}

template <typename T>
Var<T> constant(Array<T> value, const char* op = "const") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  check_finite(n->value, op);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(Array<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->is_param = true;
  n->op = "param";
  check_finite(n->value, "param");
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> make_op(const char* op, Array<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  check_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  if (grad_recording_flag()) {
    for (const auto& p : parents)
      if (p.requires_grad()) {
        rg = true;
        break;
      }
  }
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

// Reverse topological order over the requires_grad subgraph reachable from
// `root` (iterative; graphs can be thousands of nodes deep).
template <typename T>
std::vector<Node<T>*> topo_order(const Var<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node(), 0});
  visited.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next_parent++].node();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;  // post-order: parents before node; reverse for backprop
}

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.val().numel() != 1)
    throw ShapeError("backward() requires a scalar, got shape " + shape_str(loss.val().shape));
  if (!loss.requires_grad()) return;
  auto order = topo_order(loss);
  loss.node()->ensure_grad().data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

template <typename T, typename F>
Array<T> ew_unary(const Array<T>& a, F f) {
  Array<T> out;
  out.shape = a.shape;
  out.data.resize(a.data.size());
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <typename T>
void require_same_shape(const Array<T>& a, const Array<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.val(), b.val(), "add");
  Array<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  return make_op<T>("add", std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.val(), b.val(), "sub");
  Array<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
  return make_op<T>("sub", std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.val(), b.val(), "mul");
  Array<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
  return make_op<T>("mul", std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * b.val().data[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * a.val().data[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Array<T> out = ew_unary(a.val(), [c](T x) { return x * c; });
  return make_op<T>("scale", std::move(out), {a}, [a, c](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * c;
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Array<T> out = ew_unary(a.val(), [c](T x) { return x + c; });
  return make_op<T>("add_scalar", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
  });
}

// a [m x n] + row vector b [1 x n] broadcast over rows (bias add).
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
  const size_t m = a.val().rows(), ncols = a.val().cols();
  if (b.val().numel() != ncols)
    throw ShapeError("add_rowvec: vector length " + std::to_string(b.val().numel()) +
                     " vs cols " + std::to_string(ncols));
  Array<T> out = a.val();
  for (size_t r = 0; r < m; ++r)
    for (size_t c = 0; c < ncols; ++c) out.data[r * ncols + c] += b.val().data[c];
  return make_op<T>("add_rowvec", std::move(out), {a, b}, [a, b, m, ncols](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      for (size_t r = 0; r < m; ++r)
        for (size_t c = 0; c < ncols; ++c) g.data[c] += n.grad.data[r * ncols + c];
    }
  });
}

// ---------------------------------------------------------------------------
// matrix products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().cols() != b.val().rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.val().shape) + " x " +
                     shape_str(b.val().shape));
  Array<T> out({a.val().rows(), b.val().cols()});
  mat(out).noalias() = mat(a.val()) * mat(b.val());
  return make_op<T>("matmul", std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      mat(g).noalias() += mat(n.grad) * mat(b.val()).transpose();
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      mat(g).noalias() += mat(a.val()).transpose() * mat(n.grad);
    }
  });
}

// a [m x k] * b^T where b is [n x k]; avoids materializing transposes.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.val().cols() != b.val().cols())
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.val().shape) + " x " +
                     shape_str(b.val().shape) + "^T");
  Array<T> out({a.val().rows(), b.val().rows()});
  mat(out).noalias() = mat(a.val()) * mat(b.val()).transpose();
  return make_op<T>("matmul_nt", std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) {
      auto& g = a.node()->ensure_grad();
      mat(g).noalias() += mat(n.grad) * mat(b.val());
    }
    if (b.requires_grad()) {
      auto& g = b.node()->ensure_grad();
      mat(g).noalias() += mat(n.grad).transpose() * mat(a.val());
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Array<T> out({a.val().cols(), a.val().rows()});
  mat(out) = mat(a.val()).transpose();
  return make_op<T>("transpose", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    mat(g) += mat(n.grad).transpose();
  });
}

// ---------------------------------------------------------------------------
// nonlinearities

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Array<T> out = ew_unary(a.val(), [](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  return make_op<T>("sigmoid", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const T s = n.value.data[i];
      g.data[i] += n.grad.data[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& a) {
  Array<T> out = ew_unary(a.val(), [](T x) { return std::tanh(x); });
  return make_op<T>("tanh", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const T t = n.value.data[i];
      g.data[i] += n.grad.data[i] * (T(1) - t * t);
    }
  });
}

// softplus(x) = log(1 + e^x), evaluated in the overflow-safe form.
template <typename T>
Var<T> softplus(const Var<T>& a) {
  Array<T> out = ew_unary(a.val(), [](T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
  });
  return make_op<T>("softplus", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const T x = a.val().data[i];
      const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      g.data[i] += n.grad.data[i] * s;
    }
  });
}

// Smooth tanh-approximation GELU; chosen over relu so the whole loss surface
// is C^1 and finite-difference checks stay meaningful.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  Array<T> out = ew_unary(a.val(), [](T x) {
    const double xd = static_cast<double>(x);
    const double u = 0.7978845608028654 * (xd + 0.044715 * xd * xd * xd);  // sqrt(2/pi)
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
  });
  return make_op<T>("gelu", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const double x = static_cast<double>(a.val().data[i]);
      const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = 0.7978845608028654 * (1.0 + 3.0 * 0.044715 * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      g.data[i] += n.grad.data[i] * static_cast<T>(d);
    }
  });
}

// |x|; the subgradient convention at 0 is 0. Used by grad-check fixtures.
template <typename T>
Var<T> abs_op(const Var<T>& a) {
  Array<T> out = ew_unary(a.val(), [](T x) { return std::abs(x); });
  return make_op<T>("abs", std::move(out), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const T x = a.val().data[i];
      const T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      g.data[i] += n.grad.data[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// softmax family

template <typename T>
void softmax_row_inplace(T* x, size_t n) {
  T mx = x[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = T(0);
  for (size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  for (size_t i = 0; i < n; ++i) x[i] /= sum;
}

// Row-wise softmax with an optional additive mask (same shape as `a`).
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const Array<T>* additive_mask = nullptr) {
  const size_t m = a.val().rows(), ncols = a.val().cols();
  Array<T> out = a.val();
  if (additive_mask) {
    require_same_shape(a.val(), *additive_mask, "softmax_rows mask");
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += additive_mask->data[i];
  }
  for (size_t r = 0; r < m; ++r) softmax_row_inplace(out.data.data() + r * ncols, ncols);
  return make_op<T>("softmax", std::move(out), {a}, [a, m, ncols](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    for (size_t r = 0; r < m; ++r) {
      const T* y = n.value.data.data() + r * ncols;
      const T* gy = n.grad.data.data() + r * ncols;
      T dot = T(0);
      for (size_t c = 0; c < ncols; ++c) dot += gy[c] * y[c];
      T* gx = g.data.data() + r * ncols;
      for (size_t c = 0; c < ncols; ++c) gx[c] += (gy[c] - dot) * y[c];
    }
  });
}

// General-axis softmax for rank-1 and rank-2 inputs.
template <typename T>
Var<T> softmax(const Var<T>& a, size_t axis) {
  if (a.val().rank() == 1) {
    if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " on rank-1 input");
    Array<T> out = a.val();
    softmax_row_inplace(out.data.data(), out.data.size());
    const size_t n_elems = out.data.size();
    return make_op<T>("softmax", std::move(out), {a}, [a, n_elems](Node<T>& n) {
      auto& g = a.node()->ensure_grad();
      T dot = T(0);
      for (size_t i = 0; i < n_elems; ++i) dot += n.grad.data[i] * n.value.data[i];
      for (size_t i = 0; i < n_elems; ++i)
        g.data[i] += (n.grad.data[i] - dot) * n.value.data[i];
    });
  }
  if (a.val().rank() != 2 || axis > 1)
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(a.val().shape));
  if (axis == 1) return softmax_rows(a);
  return transpose(softmax_rows(transpose(a)));
}

// ---------------------------------------------------------------------------
// normalization

template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const size_t m = x.val().rows(), d = x.val().cols();
  if (gain.val().numel() != d || bias.val().numel() != d)
    throw ShapeError("layer_norm: gain/bias length must equal feature dim");
  Array<T> out({m, d});
  Array<T> xhat({m, d});
  Array<T> inv_sigma({m});
  for (size_t r = 0; r < m; ++r) {
    const T* xr = x.val().data.data() + r * d;
    T mean = T(0);
    for (size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (size_t c = 0; c < d; ++c) {
      const T diff = xr[c] - mean;
      var += diff * diff;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma.data[r] = is;
    for (size_t c = 0; c < d; ++c) {
      const T xh = (xr[c] - mean) * is;
      xhat.data[r * d + c] = xh;
      out.data[r * d + c] = gain.val().data[c] * xh + bias.val().data[c];
    }
  }
  auto xhat_sp = std::make_shared<Array<T>>(std::move(xhat));
  auto is_sp = std::make_shared<Array<T>>(std::move(inv_sigma));
  return make_op<T>(
      "layer_norm", std::move(out), {x, gain, bias}, [x, gain, bias, xhat_sp, is_sp, m, d](Node<T>& n) {
        for (size_t r = 0; r < m; ++r) {
          const T* gy = n.grad.data.data() + r * d;
          const T* xh = xhat_sp->data.data() + r * d;
          if (gain.requires_grad()) {
            auto& gg = gain.node()->ensure_grad();
            for (size_t c = 0; c < d; ++c) gg.data[c] += gy[c] * xh[c];
          }
          if (bias.requires_grad()) {
            auto& gb = bias.node()->ensure_grad();
            for (size_t c = 0; c < d; ++c) gb.data[c] += gy[c];
          }
          if (x.requires_grad()) {
            auto& gx = x.node()->ensure_grad();
            T mean_gyg = T(0), mean_gygxh = T(0);
            for (size_t c = 0; c < d; ++c) {
              const T v = gy[c] * gain.val().data[c];
              mean_gyg += v;
              mean_gygxh += v * xh[c];
            }
            mean_gyg /= static_cast<T>(d);
            mean_gygxh /= static_cast<T>(d);
            const T is = is_sp->data[r];
            T* gxr = gx.data.data() + r * d;
            for (size_t c = 0; c < d; ++c) {
              const T v = gy[c] * gain.val().data[c];
              gxr[c] += is * (v - mean_gyg - xh[c] * mean_gygxh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// gather / slice / concat

template <typename T>
Var<T> embedding_rows(const Var<T>& table, const std::vector<int>& ids) {
  const size_t v = table.val().rows(), d = table.val().cols();
  Array<T> out({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<size_t>(id) >= v)
      throw ValidationError("embedding_rows: id " + std::to_string(id) + " at position " +
                            std::to_string(i) + " outside table of " + std::to_string(v));
    std::copy_n(table.val().data.data() + static_cast<size_t>(id) * d, d,
                out.data.data() + i * d);
  }
  return make_op<T>("embedding", std::move(out), {table}, [table, ids, d](Node<T>& n) {
    auto& g = table.node()->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      T* dst = g.data.data() + static_cast<size_t>(ids[i]) * d;
      const T* src = n.grad.data.data() + i * d;
      for (size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, size_t r0, size_t h) {
  const size_t m = a.val().rows(), ncols = a.val().cols();
  if (r0 + h > m) throw ShapeError("slice_rows out of range");
  Array<T> out({h, ncols});
  std::copy_n(a.val().data.data() + r0 * ncols, h * ncols, out.data.data());
  return make_op<T>("slice_rows", std::move(out), {a}, [a, r0, ncols](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    const size_t h2 = n.value.rows();
    for (size_t r = 0; r < h2; ++r)
      for (size_t c = 0; c < ncols; ++c)
        g.data[(r0 + r) * ncols + c] += n.grad.data[r * ncols + c];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, size_t c0, size_t w) {
  const size_t m = a.val().rows(), ncols = a.val().cols();
  if (c0 + w > ncols) throw ShapeError("slice_cols out of range");
  Array<T> out({m, w});
  for (size_t r = 0; r < m; ++r)
    std::copy_n(a.val().data.data() + r * ncols + c0, w, out.data.data() + r * w);
  return make_op<T>("slice_cols", std::move(out), {a}, [a, c0, w, ncols](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    const size_t m2 = n.value.rows();
    for (size_t r = 0; r < m2; ++r)
      for (size_t c = 0; c < w; ++c) g.data[r * ncols + c0 + c] += n.grad.data[r * w + c];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const size_t m = parts[0].val().rows();
  size_t total = 0;
  for (const auto& p : parts) {
    if (p.val().rows() != m) throw ShapeError("concat_cols: row mismatch");
    total += p.val().cols();
  }
  Array<T> out({m, total});
  size_t off = 0;
  for (const auto& p : parts) {
    const size_t w = p.val().cols();
    for (size_t r = 0; r < m; ++r)
      std::copy_n(p.val().data.data() + r * w, w, out.data.data() + r * total + off);
    off += w;
  }
  return make_op<T>("concat_cols", std::move(out), parts, [parts, m, total](Node<T>& n) {
    size_t off2 = 0;
    for (const auto& p : parts) {
      const size_t w = p.val().cols();
      if (p.requires_grad()) {
        auto& g = p.node()->ensure_grad();
        for (size_t r = 0; r < m; ++r)
          for (size_t c = 0; c < w; ++c) g.data[r * w + c] += n.grad.data[r * total + off2 + c];
      }
      off2 += w;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = T(0);
  for (T v : a.val().data) s += v;
  return make_op<T>("sum", Array<T>::scalar(s), {a}, [a](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    const T go = n.grad.data[0];
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += go;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const T inv = T(1) / static_cast<T>(a.val().numel());
  T s = T(0);
  for (T v : a.val().data) s += v;
  return make_op<T>("mean", Array<T>::scalar(s * inv), {a}, [a, inv](Node<T>& n) {
    auto& g = a.node()->ensure_grad();
    const T go = n.grad.data[0] * inv;
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += go;
  });
}

// Mean over rows with include[r] != 0; output shape [1 x d].
template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, const std::vector<uint8_t>& include) {
  const size_t m = x.val().rows(), d = x.val().cols();
  if (include.size() != m)
    throw ShapeError("masked_mean_rows: mask length " + std::to_string(include.size()) +
                     " vs rows " + std::to_string(m));
  size_t cnt = 0;
  for (uint8_t b : include) cnt += (b != 0);
  if (cnt == 0) throw ValidationError("masked_mean_rows: empty effective sequence");
  Array<T> out({1, d});
  for (size_t r = 0; r < m; ++r) {
    if (!include[r]) continue;
    const T* xr = x.val().data.data() + r * d;
    for (size_t c = 0; c < d; ++c) out.data[c] += xr[c];
  }
  const T inv = T(1) / static_cast<T>(cnt);
  for (size_t c = 0; c < d; ++c) out.data[c] *= inv;
  return make_op<T>("masked_mean_rows", std::move(out), {x}, [x, include, inv, m, d](Node<T>& n) {
    auto& g = x.node()->ensure_grad();
    for (size_t r = 0; r < m; ++r) {
      if (!include[r]) continue;
      T* gr = g.data.data() + r * d;
      for (size_t c = 0; c < d; ++c) gr[c] += n.grad.data[c] * inv;
    }
  });
}

// Mean over included rows of (logsumexp(row) - row[target]): token-level
// cross entropy fused for stability. Rows with include[r] == 0 are skipped.
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& include) {
  const size_t m = logits.val().rows(), v = logits.val().cols();
  if (targets.size() != m || include.size() != m)
    throw ShapeError("cross_entropy_rows: need one target and include flag per row");
  size_t cnt = 0;
  for (uint8_t b : include) cnt += (b != 0);
  if (cnt == 0) throw ValidationError("cross_entropy_rows: no included rows");
  double total = 0;
  for (size_t r = 0; r < m; ++r) {
    if (!include[r]) continue;
    const int t = targets[r];
    if (t < 0 || static_cast<size_t>(t) >= v)
      throw ValidationError("cross_entropy_rows: target " + std::to_string(t) + " at row " +
                            std::to_string(r) + " outside vocab of " + std::to_string(v));
    const T* row = logits.val().data.data() + r * v;
    T mx = row[0];
    for (size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (size_t c = 0; c < v; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
    total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[t]);
  }
  const T inv = T(1) / static_cast<T>(cnt);
  Array<T> out = Array<T>::scalar(static_cast<T>(total) * inv);
  return make_op<T>("cross_entropy", std::move(out), {logits},
                    [logits, targets, include, inv, m, v](Node<T>& n) {
                      auto& g = logits.node()->ensure_grad();
                      const T go = n.grad.data[0] * inv;
                      std::vector<T> prob(v);
                      for (size_t r = 0; r < m; ++r) {
                        if (!include[r]) continue;
                        const T* row = logits.val().data.data() + r * v;
                        std::copy_n(row, v, prob.data());
                        softmax_row_inplace(prob.data(), v);
                        T* gr = g.data.data() + r * v;
                        for (size_t c = 0; c < v; ++c) gr[c] += go * prob[c];
                        gr[targets[r]] -= go;
                      }
                    });
}

// ---------------------------------------------------------------------------
// stochastic / structural

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
  const T keep_inv = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.val().numel());
  Array<T> out = x.val();
  for (size_t i = 0; i < out.data.size(); ++i) {
    const T m = rng.uniform01() >= rate ? keep_inv : T(0);
    (*mask)[i] = m;
    out.data[i] *= m;
  }
  return make_op<T>("dropout", std::move(out), {x}, [x, mask](Node<T>& n) {
    auto& g = x.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * (*mask)[i];
  });
}

// Re-enters the graph as a constant (cuts gradient flow).
template <typename T>
Var<T> detach(const Var<T>& x) {
  return constant(x.val(), "detach");
}

// Forward: exact one-hot at the row argmax (first maximum wins on ties).
// Backward: identity into the soft input, i.e. hard = soft + stopgrad(onehot - soft).
template <typename T>
Var<T> hard_onehot_straight_through(const Var<T>& soft) {
  const size_t m = soft.val().rows(), v = soft.val().cols();
  Array<T> out({m, v});
  for (size_t r = 0; r < m; ++r) {
    const T* row = soft.val().data.data() + r * v;
    const size_t amax = static_cast<size_t>(
        std::max_element(row, row + v) - row);
    out.data[r * v + amax] = T(1);
  }
  return make_op<T>("straight_through", std::move(out), {soft}, [soft](Node<T>& n) {
    auto& g = soft.node()->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
  });
}

}  // namespace todsel::ts
