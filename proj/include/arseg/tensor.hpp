#pragma once

// Dense tensors (float for training, double for gradcheck) with reverse-mode
// autodiff over a dynamic graph. Ops build Node closures; backward() runs an
// iterative reverse-topological sweep accumulating into .grad buffers.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "arseg/common.hpp"
#include "arseg/gemm.hpp"
#include "arseg/rng.hpp"

namespace arseg::core {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad, accumulates into the inputs' grads.
  std::function<void(const TensorImpl<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // lazily allocated, same extent as data once present
  bool requires_grad = false;
  std::unique_ptr<Node<T>> node;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Graph recording is on by default; NoGradGuard disables it (inference/eval).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  // ---- constructors -------------------------------------------------------
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }
  static Tensor filled(std::vector<int> shape, T value, bool requires_grad = false) {
    check_shape(shape);
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data.assign(impl->numel(), value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    check_shape(shape);
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    int64_t n = impl->numel();
    ARSG_CHECK_DIM(static_cast<int64_t>(data.size()) == n, "from_data: data length ", data.size(),
                   " != shape product ", n);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return filled({1}, value, requires_grad);
  }
  // Xavier-uniform fan-in/fan-out init for a conv/linear weight.
  static Tensor xavier(std::vector<int> shape, Rng& rng, int fan_in, int fan_out) {
    Tensor t = zeros(shape, true);
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
  }
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  // ---- basic access -------------------------------------------------------
  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }
  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

  T item() const {
    ARSG_CHECK_CONTRACT(numel() == 1, "item: tensor has ", numel(), " elements");
    return impl_->data[0];
  }
  // 4-D accessor (n,c,h,w); lower-rank tensors use the trailing indices.
  T at(int n, int c, int h, int w) const {
    const auto& s = impl_->shape;
    ARSG_CHECK_DIM(s.size() == 4, "at(n,c,h,w): tensor is ", s.size(), "-d");
    return impl_->data[((static_cast<int64_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
  }
  T at2(int i, int j) const {
    const auto& s = impl_->shape;
    ARSG_CHECK_DIM(s.size() == 2, "at2: tensor is ", s.size(), "-d");
    return impl_->data[static_cast<int64_t>(i) * s[1] + j];
  }

  Tensor clone() const {
    return from_data(impl_->shape, impl_->data, impl_->requires_grad);
  }
  // Same storage viewed as a leaf (drops graph history).
  Tensor detach() const {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
  }

  // ---- reverse-mode sweep -------------------------------------------------
  void backward() const {
    ARSG_CHECK_CONTRACT(numel() == 1, "backward: loss must be scalar, got ", numel(),
                        " elements");
    // Iterative post-order DFS for the topological order.
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> visited;
    struct Frame {
      TensorImpl<T>* impl;
      size_t next_child;
    };
    std::vector<Frame> stack;
    if (visited.insert(impl_.get()).second) stack.push_back({impl_.get(), 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      Node<T>* node = f.impl->node.get();
      size_t n_children = node ? node->inputs.size() : 0;
      if (f.next_child < n_children) {
        TensorImpl<T>* child = node->inputs[f.next_child++].get();
        if (child->requires_grad && visited.insert(child).second)
          stack.push_back({child, 0});
      } else {
        order.push_back(f.impl);
        stack.pop_back();
      }
    }
    impl_->ensure_grad();
    impl_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorImpl<T>* impl = *it;
      if (impl->node && impl->node->backward) impl->node->backward(*impl);
    }
  }

 private:
  static void check_shape(const std::vector<int>& shape) {
    ARSG_CHECK_DIM(!shape.empty() && shape.size() <= 4, "tensor rank must be 1..4, got ",
                   shape.size());
    for (int d : shape) ARSG_CHECK_DIM(d > 0, "tensor extents must be positive");
  }
  std::shared_ptr<TensorImpl<T>> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Op plumbing.
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<T> data, const char* op,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>&)> backward) {
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data));
  bool needs = false;
  if (grad_mode())
    for (const auto& in : inputs)
      if (in.requires_grad()) needs = true;
  if (needs) {
    out.set_requires_grad(true);
    auto node = std::make_unique<Node<T>>();
    node->op = op;
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

template <typename T>
void accumulate(const std::shared_ptr<TensorImpl<T>>& dst, const T* src, int64_t n) {
  if (!dst->requires_grad) return;
  dst->ensure_grad();
  T* g = dst->grad.data();
  for (int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops.
// ---------------------------------------------------------------------------
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  ARSG_CHECK_DIM(a.shape() == b.shape(), op, ": operand shapes differ");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "add", {a, b}, [ia, ib, n](const TensorImpl<T>& o) {
        detail::accumulate(ia, o.grad.data(), n);
        detail::accumulate(ib, o.grad.data(), n);
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "sub", {a, b}, [ia, ib, n](const TensorImpl<T>& o) {
        detail::accumulate(ia, o.grad.data(), n);
        if (ib->requires_grad) {
          ib->ensure_grad();
          for (int64_t i = 0; i < n; ++i) ib->grad[i] -= o.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "mul", {a, b}, [ia, ib, n](const TensorImpl<T>& o) {
        if (ia->requires_grad) {
          ia->ensure_grad();
          for (int64_t i = 0; i < n; ++i) ia->grad[i] += o.grad[i] * ib->data[i];
        }
        if (ib->requires_grad) {
          ib->ensure_grad();
          for (int64_t i = 0; i < n; ++i) ib->grad[i] += o.grad[i] * ia->data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * s;
  auto ia = a.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "scale", {a}, [ia, s, n](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ia->grad[i] += o.grad[i] * s;
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + c;
  auto ia = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add_scalar", {a},
                                [ia, n](const TensorImpl<T>& o) {
                                  detail::accumulate(ia, o.grad.data(), n);
                                });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] > T(0) ? pa[i] : T(0);
  auto ia = a.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "relu", {a}, [ia, n](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          if (ia->data[i] > T(0)) ia->grad[i] += o.grad[i];
      });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) {
    ARSG_CHECK_CONTRACT(pa[i] > T(0), "log: non-positive input ", pa[i]);
    out[i] = std::log(pa[i]);
  }
  auto ia = a.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "log", {a}, [ia, n](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ia->grad[i] += o.grad[i] / ia->data[i];
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(pa[i]);
  auto ia = a.impl();
  std::vector<T> saved = out;
  return detail::make_result<T>(
      a.shape(), std::move(out), "exp", {a},
      [ia, n, saved = std::move(saved)](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ia->grad[i] += o.grad[i] * saved[i];
      });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  int64_t n = a.numel();
  const T* pa = a.data().data();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  auto ia = a.impl();
  return detail::make_result<T>(
      {1}, {acc}, "sum", {a}, [ia, n](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        T g = o.grad[0];
        for (int64_t i = 0; i < n; ++i) ia->grad[i] += g;
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// x / sum(x), any shape; used to turn the accumulated joint into a distribution.
template <typename T>
Tensor<T> normalize_sum(const Tensor<T>& a) {
  int64_t n = a.numel();
  const T* pa = a.data().data();
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  ARSG_CHECK_CONTRACT(s > T(0), "normalize_sum: total mass must be positive, got ", s);
  std::vector<T> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = pa[i] / s;
  auto ia = a.impl();
  std::vector<T> y = out;
  return detail::make_result<T>(
      a.shape(), std::move(out), "normalize_sum", {a},
      [ia, n, s, y = std::move(y)](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        T dot = T(0);
        for (int64_t i = 0; i < n; ++i) dot += o.grad[i] * y[i];
        for (int64_t i = 0; i < n; ++i) ia->grad[i] += (o.grad[i] - dot) / s;
      });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  ARSG_CHECK_DIM(a.ndim() == 2 && b.ndim() == 2, "matmul: both operands must be 2-d");
  int M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  ARSG_CHECK_DIM(K == K2, "matmul: inner extents differ (", K, " vs ", K2, ")");
  std::vector<T> out(static_cast<int64_t>(M) * N);
  gemm_nn(a.data().data(), b.data().data(), out.data(), M, K, N);
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      {M, N}, std::move(out), "matmul", {a, b}, [ia, ib, M, K, N](const TensorImpl<T>& o) {
        if (ia->requires_grad) {
          ia->ensure_grad();
          // dA += dC * B^T
          std::vector<T> tmp(static_cast<int64_t>(M) * K);
          gemm_nt(o.grad.data(), ib->data.data(), tmp.data(), M, N, K);
          for (int64_t i = 0; i < static_cast<int64_t>(M) * K; ++i) ia->grad[i] += tmp[i];
        }
        if (ib->requires_grad) {
          ib->ensure_grad();
          // dB += A^T * dC
          std::vector<T> tmp(static_cast<int64_t>(K) * N);
          gemm_tn(ia->data.data(), o.grad.data(), tmp.data(), K, M, N);
          for (int64_t i = 0; i < static_cast<int64_t>(K) * N; ++i) ib->grad[i] += tmp[i];
        }
      });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  ARSG_CHECK_DIM(a.ndim() == 2, "transpose2d: operand must be 2-d");
  int M = a.dim(0), N = a.dim(1);
  std::vector<T> out(static_cast<int64_t>(M) * N);
  const T* pa = a.data().data();
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[static_cast<int64_t>(j) * M + i] = pa[static_cast<int64_t>(i) * N + j];
  auto ia = a.impl();
  return detail::make_result<T>(
      {N, M}, std::move(out), "transpose2d", {a}, [ia, M, N](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int j = 0; j < N; ++j)
          for (int i = 0; i < M; ++i)
            ia->grad[static_cast<int64_t>(i) * N + j] += o.grad[static_cast<int64_t>(j) * M + i];
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  ARSG_CHECK_DIM(n == a.numel(), "reshape: element count mismatch");
  std::vector<T> out = a.data();
  auto ia = a.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a},
                                [ia](const TensorImpl<T>& o) {
                                  detail::accumulate(ia, o.grad.data(), ia->numel());
                                });
}

// ---------------------------------------------------------------------------
// Channel-axis structure ops (NCHW).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  ARSG_CHECK_DIM(a.ndim() == 4 && b.ndim() == 4, "concat_channels: operands must be 4-d");
  ARSG_CHECK_DIM(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                 "concat_channels: non-channel extents differ");
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(static_cast<int64_t>(N) * (Ca + Cb) * hw);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.data() + (static_cast<int64_t>(n) * (Ca + Cb)) * hw,
                pa + static_cast<int64_t>(n) * Ca * hw, sizeof(T) * Ca * hw);
    std::memcpy(out.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * hw,
                pb + static_cast<int64_t>(n) * Cb * hw, sizeof(T) * Cb * hw);
  }
  auto ia = a.impl(), ib = b.impl();
  return detail::make_result<T>(
      {N, Ca + Cb, H, W}, std::move(out), "concat_channels", {a, b},
      [ia, ib, N, Ca, Cb, hw](const TensorImpl<T>& o) {
        for (int n = 0; n < N; ++n) {
          const T* go = o.grad.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw;
          if (ia->requires_grad) {
            ia->ensure_grad();
            T* ga = ia->grad.data() + static_cast<int64_t>(n) * Ca * hw;
            for (int64_t i = 0; i < Ca * hw; ++i) ga[i] += go[i];
          }
          if (ib->requires_grad) {
            ib->ensure_grad();
            T* gb = ib->grad.data() + static_cast<int64_t>(n) * Cb * hw;
            for (int64_t i = 0; i < Cb * hw; ++i) gb[i] += go[Ca * hw + i];
          }
        }
      });
}

template <typename T>
Tensor<T> zero_pad_channels(const Tensor<T>& a, int c_new) {
  ARSG_CHECK_DIM(a.ndim() == 4, "zero_pad_channels: operand must be 4-d");
  int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  ARSG_CHECK_DIM(c_new >= C, "zero_pad_channels: target channels ", c_new, " < current ", C);
  int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(static_cast<int64_t>(N) * c_new * hw, T(0));
  const T* pa = a.data().data();
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + static_cast<int64_t>(n) * c_new * hw,
                pa + static_cast<int64_t>(n) * C * hw, sizeof(T) * C * hw);
  auto ia = a.impl();
  return detail::make_result<T>(
      {N, c_new, H, W}, std::move(out), "zero_pad_channels", {a},
      [ia, N, C, c_new, hw](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const T* go = o.grad.data() + static_cast<int64_t>(n) * c_new * hw;
          T* ga = ia->grad.data() + static_cast<int64_t>(n) * C * hw;
          for (int64_t i = 0; i < C * hw; ++i) ga[i] += go[i];
        }
      });
}

// Slice one image out of a batch, keeping the batch axis (shape 1xCxHxW).
template <typename T>
Tensor<T> select_image(const Tensor<T>& a, int n) {
  ARSG_CHECK_DIM(a.ndim() == 4, "select_image: operand must be 4-d");
  ARSG_CHECK_DIM(n >= 0 && n < a.dim(0), "select_image: index ", n, " out of range");
  int C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t sz = static_cast<int64_t>(C) * H * W;
  std::vector<T> out(a.data().begin() + n * sz, a.data().begin() + (n + 1) * sz);
  auto ia = a.impl();
  return detail::make_result<T>(
      {1, C, H, W}, std::move(out), "select_image", {a}, [ia, n, sz](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        T* ga = ia->grad.data() + n * sz;
        for (int64_t i = 0; i < sz; ++i) ga[i] += o.grad[i];
      });
}

// Concatenate 1xCxHxW parts back into a batch.
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  ARSG_CHECK_DIM(!parts.empty(), "concat_batch: no parts");
  int C = parts[0].dim(1), H = parts[0].dim(2), W = parts[0].dim(3);
  int64_t sz = static_cast<int64_t>(C) * H * W;
  std::vector<T> out;
  out.reserve(sz * parts.size());
  for (const auto& p : parts) {
    ARSG_CHECK_DIM(p.ndim() == 4 && p.dim(0) == 1 && p.dim(1) == C && p.dim(2) == H && p.dim(3) == W,
                   "concat_batch: part shape mismatch");
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Tensor<T> result = Tensor<T>::from_data({static_cast<int>(parts.size()), C, H, W}, std::move(out));
  bool needs = false;
  if (grad_mode())
    for (const auto& p : parts)
      if (p.requires_grad()) needs = true;
  if (needs) {
    result.set_requires_grad(true);
    auto node = std::make_unique<Node<T>>();
    node->op = "concat_batch";
    for (const auto& p : parts) node->inputs.push_back(p.impl());
    std::vector<std::shared_ptr<TensorImpl<T>>> impls = node->inputs;
    node->backward = [impls, sz](const TensorImpl<T>& o) {
      for (size_t n = 0; n < impls.size(); ++n)
        detail::accumulate(impls[n], o.grad.data() + n * sz, sz);
    };
    result.impl()->node = std::move(node);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Softmax-family ops.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  ARSG_CHECK_DIM(axis >= 0 && axis < a.ndim(), "softmax: axis ", axis, " invalid for rank ",
                 a.ndim());
  const auto& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[i];
  int64_t K = s[axis];
  int64_t n = a.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  parallel_for(outer * inner, [&](int64_t oi) {
    int64_t o = oi / inner, i = oi % inner;
    const T* px = pa + o * K * inner + i;
    T* py = out.data() + o * K * inner + i;
    T m = px[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, px[k * inner]);
    T z = T(0);
    for (int64_t k = 0; k < K; ++k) {
      T e = std::exp(px[k * inner] - m);
      py[k * inner] = e;
      z += e;
    }
    for (int64_t k = 0; k < K; ++k) py[k * inner] /= z;
  });
  auto ia = a.impl();
  std::vector<T> y = out;
  return detail::make_result<T>(
      a.shape(), std::move(out), "softmax", {a},
      [ia, outer, inner, K, y = std::move(y)](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t oi = 0; oi < outer * inner; ++oi) {
          int64_t ob = oi / inner, i = oi % inner;
          const T* py = y.data() + ob * K * inner + i;
          const T* pg = o.grad.data() + ob * K * inner + i;
          T* gx = ia->grad.data() + ob * K * inner + i;
          T dot = T(0);
          for (int64_t k = 0; k < K; ++k) dot += pg[k * inner] * py[k * inner];
          for (int64_t k = 0; k < K; ++k)
            gx[k * inner] += (pg[k * inner] - dot) * py[k * inner];
        }
      });
}

// Row-wise log-sum-exp of a 2-d tensor, returns shape {M}.
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& a) {
  ARSG_CHECK_DIM(a.ndim() == 2, "logsumexp_rows: operand must be 2-d");
  int M = a.dim(0), N = a.dim(1);
  std::vector<T> out(M);
  const T* pa = a.data().data();
  for (int i = 0; i < M; ++i) {
    const T* row = pa + static_cast<int64_t>(i) * N;
    T m = row[0];
    for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int j = 0; j < N; ++j) z += std::exp(row[j] - m);
    out[i] = m + std::log(z);
  }
  auto ia = a.impl();
  std::vector<T> lse = out;
  return detail::make_result<T>(
      {M}, std::move(out), "logsumexp_rows", {a},
      [ia, M, N, lse = std::move(lse)](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int i = 0; i < M; ++i) {
          const T* row = ia->data.data() + static_cast<int64_t>(i) * N;
          T* g = ia->grad.data() + static_cast<int64_t>(i) * N;
          for (int j = 0; j < N; ++j) g[j] += o.grad[i] * std::exp(row[j] - lse[i]);
        }
      });
}

// Per-anchor InfoNCE term for a score matrix whose LAST column is the positive:
//   t_i = logsumexp(scores_i) - scores_i[last] - ln(N)   (N = column count).
// Computed in shifted form so the all-equal-scores case is exactly 0.
template <typename T>
Tensor<T> infonce_terms(const Tensor<T>& scores) {
  ARSG_CHECK_DIM(scores.ndim() == 2, "infonce_terms: scores must be 2-d");
  int M = scores.dim(0), N = scores.dim(1);
  ARSG_CHECK_DIM(N >= 2, "infonce_terms: need at least one negative column");
  std::vector<T> out(M);
  const T* ps = scores.data().data();
  T lnN = std::log(static_cast<T>(N));
  for (int i = 0; i < M; ++i) {
    const T* row = ps + static_cast<int64_t>(i) * N;
    T m = row[0];
    for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int j = 0; j < N; ++j) z += std::exp(row[j] - m);
    // (lse - m) - (pos - m) - lnN: exact 0 when every score equals every other.
    out[i] = std::log(z) - (row[N - 1] - m) - lnN;
  }
  auto is = scores.impl();
  return detail::make_result<T>(
      {M}, std::move(out), "infonce_terms", {scores}, [is, M, N](const TensorImpl<T>& o) {
        if (!is->requires_grad) return;
        is->ensure_grad();
        for (int i = 0; i < M; ++i) {
          const T* row = is->data.data() + static_cast<int64_t>(i) * N;
          T* g = is->grad.data() + static_cast<int64_t>(i) * N;
          T m = row[0];
          for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
          T z = T(0);
          for (int j = 0; j < N; ++j) z += std::exp(row[j] - m);
          T go = o.grad[i];
          for (int j = 0; j < N; ++j) g[j] += go * std::exp(row[j] - m) / z;
          g[N - 1] -= go;
        }
      });
}

// Sum over the channel axis of an NCHW tensor -> Nx1xHxW.
template <typename T>
Tensor<T> sum_channels(const Tensor<T>& a) {
  ARSG_CHECK_DIM(a.ndim() == 4, "sum_channels: operand must be 4-d");
  int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(static_cast<int64_t>(N) * hw, T(0));
  const T* pa = a.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = pa + (static_cast<int64_t>(n) * C + c) * hw;
      T* dst = out.data() + static_cast<int64_t>(n) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
  auto ia = a.impl();
  return detail::make_result<T>(
      {N, 1, H, W}, std::move(out), "sum_channels", {a},
      [ia, N, C, hw](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            T* g = ia->grad.data() + (static_cast<int64_t>(n) * C + c) * hw;
            const T* go = o.grad.data() + static_cast<int64_t>(n) * hw;
            for (int64_t i = 0; i < hw; ++i) g[i] += go[i];
          }
      });
}

// ---------------------------------------------------------------------------
// Geometric ops used by augmentation inversion (spatial axes only).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& a) {
  ARSG_CHECK_DIM(a.ndim() == 4, "flip_horizontal: operand must be 4-d");
  int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
    for (int h = 0; h < H; ++h) {
      const T* src = pa + (nc * H + h) * W;
      T* dst = out.data() + (nc * H + h) * W;
      for (int w = 0; w < W; ++w) dst[w] = src[W - 1 - w];
    }
  auto ia = a.impl();
  return detail::make_result<T>(
      a.shape(), std::move(out), "flip_horizontal", {a},
      [ia, N, C, H, W](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
          for (int h = 0; h < H; ++h) {
            const T* go = o.grad.data() + (nc * H + h) * W;
            T* ga = ia->grad.data() + (nc * H + h) * W;
            for (int w = 0; w < W; ++w) ga[W - 1 - w] += go[w];
          }
      });
}

// k quarter-turns counter-clockwise: out[i][j] = in[j][H_out - 1 - i] for k=1.
template <typename T>
Tensor<T> rot90(const Tensor<T>& a, int k) {
  ARSG_CHECK_DIM(a.ndim() == 4, "rot90: operand must be 4-d");
  k = ((k % 4) + 4) % 4;
  if (k == 0) {
    // Identity pass-through still records a node so graphs stay uniform.
    return scale(a, T(1));
  }
  int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int Ho = (k % 2 == 0) ? H : W;
  int Wo = (k % 2 == 0) ? W : H;
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  // Maps output (i, j) to the source input position (r, c) for k quarter-turns
  // CCW: k=1 -> in[j][W-1-i], k=2 -> in[H-1-i][W-1-j], k=3 -> in[H-1-j][i].
  auto src_index = [H, W](int i, int j, int kk) {
    switch (kk) {
      case 1: return std::pair<int, int>{j, W - 1 - i};
      case 2: return std::pair<int, int>{H - 1 - i, W - 1 - j};
      default: return std::pair<int, int>{H - 1 - j, i};
    }
  };
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const T* src = pa + nc * H * W;
    T* dst = out.data() + nc * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        auto [r, c] = src_index(i, j, k);
        dst[i * Wo + j] = src[r * W + c];
      }
  }
  auto ia = a.impl();
  return detail::make_result<T>(
      {N, C, Ho, Wo}, std::move(out), "rot90", {a},
      [ia, N, C, H, W, Ho, Wo, k, src_index](const TensorImpl<T>& o) {
        if (!ia->requires_grad) return;
        ia->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
          const T* go = o.grad.data() + nc * Ho * Wo;
          T* ga = ia->grad.data() + nc * H * W;
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
              auto [r, c] = src_index(i, j, k);
              ga[r * W + c] += go[i * Wo + j];
            }
        }
      });
}

}  // namespace arseg::core
