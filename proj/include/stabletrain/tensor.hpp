#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stabletrain/common.hpp"

namespace stabletrain {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized lazily, only when participating in backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Reverse-mode autodiff tensor. A Tensor is a shared handle to a graph node;
// ops build the graph when any input requires grad, and backward() walks it
// in reverse topological order exactly once. Values are immutable after an
// op produces them; only the grad store is mutated by backward.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(numel(node_->shape), T(0));
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  // Same data, no history; gradients stop here.
  Tensor detached() const {
    Tensor out(node_->shape, node_->data, false);
    return out;
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Backward pass from a scalar loss. Repeated calls without zero_grad
  // accumulate into leaf grads.
  void backward() {
    if (size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(shape()));
    // iterative post-order DFS over parents
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].get();
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a,
                        const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T, typename... Parents>
Tensor<T> make_op(Shape shape, std::vector<T> data,
                  std::function<void(TensorNode<T>&)> backward_fn,
                  const Parents&... parents) {
  bool req = (parents.requires_grad() || ...);
  Tensor<T> out(std::move(shape), std::move(data), req);
  if (req) {
    (out.node()->parents.push_back(parents.node()), ...);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] += self.grad[i];
        }
      },
      a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] -= self.grad[i];
        }
      },
      a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an, bn](TensorNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] += self.grad[i] * an->data[i];
        }
      },
      a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an, s](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * s;
      },
      a);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (self.data[i] > T(0)) an->grad[i] += self.grad[i];
      },
      a);
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto an = a.node();
  return detail::make_op<T>(
      a.shape(), std::move(out),
      [an](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * self.data[i];
      },
      a);
}

// y = x * scale[c] + shift[c], per channel of an NCHW tensor. Constants, no
// grads flow to scale/shift; used for the normalization step in front of the
// network so FGSM input gradients pass through it.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const std::vector<T>& sc,
                         const std::vector<T>& sh) {
  if (x.shape().size() != 4 || x.shape()[1] != sc.size() ||
      sc.size() != sh.size())
    throw ShapeError("channel_affine: input " + shape_str(x.shape()) +
                     " vs scale (" + std::to_string(sc.size()) + ")");
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t base = (i * c + j) * hw;
      for (std::size_t k = 0; k < hw; ++k)
        out[base + k] = x.data()[base + k] * sc[j] + sh[j];
    }
  auto xn = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out),
      [xn, sc, n, c, hw](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t base = (i * c + j) * hw;
            for (std::size_t k = 0; k < hw; ++k)
              xn->grad[base + k] += self.grad[base + k] * sc[j];
          }
      },
      x);
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  auto an = a.node();
  return detail::make_op<T>(
      std::move(new_shape), a.data(),
      [an](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i];
      },
      a);
}

// Zero padding of the two spatial dims of an NCHW tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t p) {
  if (x.shape().size() != 4)
    throw ShapeError("pad2d: expects NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  const std::size_t oh = h + 2 * p, ow = w + 2 * p;
  std::vector<T> out(n * c * oh * ow, T(0));
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&x.data()[(i * h + y) * w], w,
                  &out[(i * oh + y + p) * ow + p]);
  auto xn = x.node();
  return detail::make_op<T>(
      Shape{n, c, oh, ow}, std::move(out),
      [xn, n, c, h, w, p, oh, ow](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * c; ++i)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t z = 0; z < w; ++z)
              xn->grad[(i * h + y) * w + z] +=
                  self.grad[(i * oh + y + p) * ow + z + p];
      },
      x);
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  auto an = a.node();
  return detail::make_op<T>(
      Shape{1}, std::vector<T>{s},
      [an](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i)
          an->grad[i] += self.grad[0];
      },
      a);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.size());
  auto an = a.node();
  return detail::make_op<T>(
      Shape{1}, std::vector<T>{s * inv},
      [an, inv](TensorNode<T>& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i)
          an->grad[i] += self.grad[0] * inv;
      },
      a);
}

// ---- dense ----

namespace detail {
// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}
// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = T(0);
      const T* arow = a + i * k;
      const T* brow = b + j * k;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
}
// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}
}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(
      Shape{m, n}, std::move(out),
      [an, bn, m, k, n](TensorNode<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::gemm_nt(m, n, k, self.grad.data(), bn->data.data(),
                          an->grad.data());
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::gemm_tn(k, m, n, an->data.data(), self.grad.data(),
                          bn->grad.data());
        }
      },
      a, b);
}

// x[N,M] + b[M] broadcast over rows
template <typename T>
Tensor<T> add_bias_rows(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.shape().size() != 2 || b.shape().size() != 1 ||
      x.shape()[1] != b.shape()[0])
    throw ShapeError("add_bias_rows: " + shape_str(x.shape()) + " + " +
                     shape_str(b.shape()));
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b.data()[j];
  auto xn = x.node(), bn = b.node();
  return detail::make_op<T>(
      x.shape(), std::move(out),
      [xn, bn, n, m](TensorNode<T>& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
              bn->grad[j] += self.grad[i * m + j];
        }
      },
      x, b);
}

// ---- convolution ----

enum class Pad { same, valid };

namespace detail {
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride, long ph,
            long pw, std::size_t oh, std::size_t ow, T* col) {
  // col: [c*kh*kw, oh*ow]
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        T* dst = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - ph;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst + oy * ow, ow, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - pw;
            dst[oy * ow + ox] = (ix < 0 || ix >= static_cast<long>(w))
                                    ? T(0)
                                    : img[(ch * h + iy) * w + ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t stride, long ph,
                long pw, std::size_t oh, std::size_t ow, T* img) {
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
        const T* src = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - ph;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - pw;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            img[(ch * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
}
}  // namespace detail

// x: [N,C,H,W], w: [F,C,kh,kw], b: [F] (may be empty tensor for no bias).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, Pad pad = Pad::same) {
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[1])
    throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) +
                     " and kernel " + shape_str(w.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    wd = x.shape()[3];
  const std::size_t f = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const bool has_bias = b.size() > 0;
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != f))
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " vs filters " +
                     std::to_string(f));
  const long ph = pad == Pad::same ? static_cast<long>((kh - 1) / 2) : 0;
  const long pw = pad == Pad::same ? static_cast<long>((kw - 1) / 2) : 0;
  if (pad == Pad::valid && (h < kh || wd < kw))
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than input " + shape_str(x.shape()));
  const std::size_t oh = (h + 2 * ph - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * pw - kw) / stride + 1;
  const std::size_t krows = c * kh * kw;

  std::vector<T> out(n * f * oh * ow, T(0));
  std::vector<T> col(krows * oh * ow);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.data().data() + i * c * h * wd, c, h, wd, kh, kw, stride,
                   ph, pw, oh, ow, col.data());
    detail::gemm_nn(f, krows, oh * ow, w.data().data(), col.data(),
                    out.data() + i * f * oh * ow);
  }
  if (has_bias)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        T* dst = out.data() + (i * f + j) * oh * ow;
        for (std::size_t k = 0; k < oh * ow; ++k) dst[k] += b.data()[j];
      }

  auto xn = x.node(), wn = w.node(), bnode = b.node();
  auto backward = [xn, wn, bnode, has_bias, n, c, h, wd, f, kh, kw, stride, ph,
                   pw, oh, ow, krows](TensorNode<T>& self) {
    std::vector<T> col(krows * oh * ow);
    for (std::size_t i = 0; i < n; ++i) {
      const T* dy = self.grad.data() + i * f * oh * ow;
      if (wn->requires_grad || xn->requires_grad)
        detail::im2col(xn->data.data() + i * c * h * wd, c, h, wd, kh, kw,
                       stride, ph, pw, oh, ow, col.data());
      if (wn->requires_grad) {
        wn->ensure_grad();
        detail::gemm_nt(f, oh * ow, krows, dy, col.data(), wn->grad.data());
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<T> dcol(krows * oh * ow, T(0));
        detail::gemm_tn(krows, f, oh * ow, wn->data.data(), dy, dcol.data());
        detail::col2im_add(dcol.data(), c, h, wd, kh, kw, stride, ph, pw, oh,
                           ow, xn->grad.data() + i * c * h * wd);
      }
      if (has_bias && bnode->requires_grad) {
        bnode->ensure_grad();
        for (std::size_t j = 0; j < f; ++j) {
          T s = T(0);
          for (std::size_t k = 0; k < oh * ow; ++k) s += dy[j * oh * ow + k];
          bnode->grad[j] += s;
        }
      }
    }
  };
  if (has_bias)
    return detail::make_op<T>(Shape{n, f, oh, ow}, std::move(out), backward, x,
                              w, b);
  return detail::make_op<T>(Shape{n, f, oh, ow}, std::move(out), backward, x,
                            w);
}

// ---- pooling ----

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.shape().size() != 4 || x.shape()[2] < k || x.shape()[3] < k)
    throw ShapeError("maxpool2d: window " + std::to_string(k) +
                     " on input " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  std::vector<T> out(n * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* img = x.data().data() + i * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (img[idx] > img[best]) best = idx;
          }
        out[(i * oh + oy) * ow + ox] = img[best];
        (*argmax)[(i * oh + oy) * ow + ox] = i * h * w + best;
      }
  }
  auto xn = x.node();
  return detail::make_op<T>(
      Shape{n, c, oh, ow}, std::move(out),
      [xn, argmax](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[(*argmax)[i]] += self.grad[i];
      },
      x);
}

// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.shape().size() != 4)
    throw ShapeError("global_avg_pool: expects NCHW, got " +
                     shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  const T inv = T(1) / static_cast<T>(hw);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = T(0);
    for (std::size_t k = 0; k < hw; ++k) s += x.data()[i * hw + k];
    out[i] = s * inv;
  }
  auto xn = x.node();
  return detail::make_op<T>(
      Shape{n, c}, std::move(out),
      [xn, hw, inv](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          for (std::size_t k = 0; k < hw; ++k)
            xn->grad[i * hw + k] += self.grad[i] * inv;
      },
      x);
}

// ---- batch norm ----

// Batch normalization over an NCHW tensor, per channel. Training mode uses
// batch statistics and updates running stats in place (momentum convention:
// running = momentum*running + (1-momentum)*batch). Eval mode uses the
// running stats. running_mean/var are plain state, not graph participants.
// update_stats=false normalizes with batch statistics but leaves the
// running stats untouched (used for perturbed-branch forwards, whose input
// distribution must not leak into the evaluation statistics).
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, std::vector<T>& running_mean,
                      std::vector<T>& running_var, bool training,
                      T momentum = T(0.9), T eps = T(1e-5),
                      bool update_stats = true) {
  if (x.shape().size() != 4)
    throw ShapeError("batchnorm2d: expects NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1],
                    hw = x.shape()[2] * x.shape()[3];
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw ShapeError("batchnorm2d: channel count mismatch, input " +
                     shape_str(x.shape()));
  const T cnt = static_cast<T>(n * hw);

  std::vector<T> mean(c), var(c);
  if (training) {
    for (std::size_t j = 0; j < c; ++j) {
      T s = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + j) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      mean[j] = s / cnt;
      T v = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + j) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const T d = p[k] - mean[j];
          v += d * d;
        }
      }
      var[j] = v / cnt;
      if (update_stats) {
        running_mean[j] =
            momentum * running_mean[j] + (T(1) - momentum) * mean[j];
        running_var[j] =
            momentum * running_var[j] + (T(1) - momentum) * var[j];
      }
    }
  } else {
    mean.assign(running_mean.begin(), running_mean.end());
    var.assign(running_var.begin(), running_var.end());
  }

  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto istd = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(x.size());
  for (std::size_t j = 0; j < c; ++j)
    (*istd)[j] = T(1) / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t base = (i * c + j) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const T xh = (x.data()[base + k] - mean[j]) * (*istd)[j];
        (*xhat)[base + k] = xh;
        out[base + k] = gamma.data()[j] * xh + beta.data()[j];
      }
    }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op<T>(
      x.shape(), std::move(out),
      [xn, gn, bn, xhat, istd, n, c, hw, cnt, training](TensorNode<T>& self) {
        for (std::size_t j = 0; j < c; ++j) {
          T dg = T(0), db = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + j) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              dg += self.grad[base + k] * (*xhat)[base + k];
              db += self.grad[base + k];
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[j] += dg;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[j] += db;
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            const T g = gn->data[j] * (*istd)[j];
            if (training) {
              const T mdy = db / cnt, mdyx = dg / cnt;
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t base = (i * c + j) * hw;
                for (std::size_t k = 0; k < hw; ++k)
                  xn->grad[base + k] +=
                      g * (self.grad[base + k] - mdy -
                           (*xhat)[base + k] * mdyx);
              }
            } else {
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t base = (i * c + j) * hw;
                for (std::size_t k = 0; k < hw; ++k)
                  xn->grad[base + k] += g * self.grad[base + k];
              }
            }
          }
        }
      },
      x, gamma, beta);
}

// ---- softmax family ----

// Row-wise log-softmax of [N,C] logits, max-subtracted.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.shape().size() != 2)
    throw ShapeError("log_softmax: expects [N,C], got " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data().data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  auto xn = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out),
      [xn, n, c](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          T gs = T(0);
          for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            xn->grad[i * c + j] +=
                self.grad[i * c + j] - std::exp(self.data[i * c + j]) * gs;
        }
      },
      x);
}

// Mean negative log-likelihood of [N,C] log-probabilities at the labels.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& logp, const std::vector<std::size_t>& labels) {
  if (logp.shape().size() != 2 || logp.shape()[0] != labels.size())
    throw ShapeError("nll_loss: log-probs " + shape_str(logp.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t n = logp.shape()[0], c = logp.shape()[1];
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] >= c)
      throw DataError("nll_loss: label " + std::to_string(labels[i]) +
                      " out of range [0," + std::to_string(c) + ")");
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s -= logp.data()[i * c + labels[i]];
  const T inv = T(1) / static_cast<T>(n);
  auto ln = logp.node();
  auto lbl = std::make_shared<std::vector<std::size_t>>(labels);
  return detail::make_op<T>(
      Shape{1}, std::vector<T>{s * inv},
      [ln, lbl, n, c, inv](TensorNode<T>& self) {
        ln->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          ln->grad[i * c + (*lbl)[i]] -= self.grad[0] * inv;
      },
      logp);
}

// ---- bilinear sampling ----

// Resize the spatial dims of an NCHW tensor with bilinear interpolation.
// Sample positions follow the half-pixel convention.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (x.shape().size() != 4 || oh == 0 || ow == 0)
    throw ShapeError("bilinear_resize: bad target for " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  struct Tap { std::size_t i0, i1; T w0, w1; };
  auto ytap = std::make_shared<std::vector<Tap>>(oh);
  auto xtap = std::make_shared<std::vector<Tap>>(ow);
  auto fill = [](std::vector<Tap>& taps, std::size_t out_n, double s,
                 std::size_t in_n) {
    for (std::size_t o = 0; o < out_n; ++o) {
      double pos = (o + 0.5) * s - 0.5;
      if (pos < 0) pos = 0;
      if (pos > in_n - 1) pos = static_cast<double>(in_n - 1);
      const std::size_t i0 = static_cast<std::size_t>(pos);
      const std::size_t i1 = std::min(i0 + 1, in_n - 1);
      const T f = static_cast<T>(pos - i0);
      taps[o] = {i0, i1, T(1) - f, f};
    }
  };
  fill(*ytap, oh, sy, h);
  fill(*xtap, ow, sx, w);
  std::vector<T> out(n * c * oh * ow);
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* img = x.data().data() + i * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Tap& ty = (*ytap)[oy];
        const Tap& tx = (*xtap)[ox];
        out[(i * oh + oy) * ow + ox] =
            ty.w0 * (tx.w0 * img[ty.i0 * w + tx.i0] +
                     tx.w1 * img[ty.i0 * w + tx.i1]) +
            ty.w1 * (tx.w0 * img[ty.i1 * w + tx.i0] +
                     tx.w1 * img[ty.i1 * w + tx.i1]);
      }
  }
  auto xn = x.node();
  return detail::make_op<T>(
      Shape{n, c, oh, ow}, std::move(out),
      [xn, ytap, xtap, n, c, h, w, oh, ow](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * c; ++i) {
          T* gimg = xn->grad.data() + i * h * w;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const Tap& ty = (*ytap)[oy];
              const Tap& tx = (*xtap)[ox];
              const T g = self.grad[(i * oh + oy) * ow + ox];
              gimg[ty.i0 * w + tx.i0] += g * ty.w0 * tx.w0;
              gimg[ty.i0 * w + tx.i1] += g * ty.w0 * tx.w1;
              gimg[ty.i1 * w + tx.i0] += g * ty.w1 * tx.w0;
              gimg[ty.i1 * w + tx.i1] += g * ty.w1 * tx.w1;
            }
        }
      },
      x);
}

// Gradient of a scalar loss with respect to an input tensor. The closure
// rebuilds the loss from x; parameter grads touched by the closure are the
// caller's to discard.
template <typename T>
std::vector<T> input_gradient(
    const std::function<Tensor<T>(const Tensor<T>&)>& loss_fn, Tensor<T> x) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = loss_fn(x);
  if (loss.size() != 1)
    throw ShapeError("input_gradient: closure must return a scalar, got " +
                     shape_str(loss.shape()));
  loss.backward();
  return x.grad();
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace stabletrain
