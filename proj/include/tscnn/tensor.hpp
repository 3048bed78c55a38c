#pragma once

// Dense row-major tensors with a reverse-mode autodiff graph.
//
// A Tensor is a shared handle to storage. Operations producing a tensor from
// inputs that require gradients attach a GraphNode holding the inputs and a
// closure that propagates the output gradient back into them. Graphs are
// released when the last handle to the output goes away.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tscnn/errors.hpp"

namespace tscnn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct TensorImpl;

template <class T>
struct GraphNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor() : Tensor(Shape{}, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    check_extents(shape);
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    check_extents(shape);
    if (numel(shape) != data.size()) {
      throw InvalidShape("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  static Tensor from_impl(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (size() != 1) throw InvalidShape("item: tensor of shape " + shape_str(shape()) + " is not a single value");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return !impl_->node; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
  void clear_grad() { impl_->grad.clear(); }

  /// Copy of the values with no graph attached and requires_grad off.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  static void check_extents(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw InvalidShape("tensor: zero extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <class T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

/// Hooks `out` into the graph when grad mode is on and any input requires a gradient.
template <class T>
void attach(Tensor<T>& out, std::string op, std::vector<ImplPtr<T>> inputs,
            std::function<void(const TensorImpl<T>&)> backward) {
  if (!grad_mode()) return;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
  if (!any) return;
  auto node = std::make_shared<GraphNode<T>>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidShape(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
}

template <class T, class F, class G>
Tensor<T> unary(const Tensor<T>& a, const char* op, F forward, G derivative) {
  const auto& x = a.values();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  Tensor<T> out(a.shape(), std::move(y));
  auto ai = a.impl();
  attach<T>(out, op, {ai}, [ai, derivative](const TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * derivative(ai->data[i], o.data[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  Tensor<T> out(a.shape(), std::move(y));
  auto ai = a.impl(), bi = b.impl();
  detail::attach<T>(out, "add", {ai, bi}, [ai, bi](const TensorImpl<T>& o) {
    for (auto* p : {ai.get(), bi.get()}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  Tensor<T> out(a.shape(), std::move(y));
  auto ai = a.impl(), bi = b.impl();
  detail::attach<T>(out, "sub", {ai, bi}, [ai, bi](const TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  Tensor<T> out(a.shape(), std::move(y));
  auto ai = a.impl(), bi = b.impl();
  detail::attach<T>(out, "mul", {ai, bi}, [ai, bi](const TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return detail::unary(a, "mul_scalar", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

/// c - a
template <class T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& a) {
  return detail::unary(a, "rsub_scalar", [c](T x) { return c - x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

/// x^exponent with a constant exponent; differentiable in the base only.
template <class T>
Tensor<T> pow_scalar(const Tensor<T>& a, T exponent) {
  return detail::unary(
      a, "pow", [exponent](T x) { return std::pow(x, exponent); },
      [exponent](T x, T) { return exponent == T(0) ? T(0) : exponent * std::pow(x, exponent - T(1)); });
}

/// log(x + eps). Throws DomainError when some x + eps <= 0.
template <class T>
Tensor<T> log_shift(const Tensor<T>& a, T eps) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] + eps > T(0))) {
      std::ostringstream os;
      os << "log_shift: argument x + eps = " << (a[i] + eps) << " <= 0 at index " << i;
      throw DomainError(os.str());
    }
  }
  return detail::unary(
      a, "log_shift", [eps](T x) { return std::log(x + eps); }, [eps](T x, T) { return T(1) / (x + eps); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator*(T c, const Tensor<T>& a) { return mul_scalar(a, c); }
template <class T>
Tensor<T> operator-(T c, const Tensor<T>& a) { return rsub_scalar(c, a); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  auto ai = a.impl();
  detail::attach<T>(out, "sum", {ai}, [ai](const TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (auto& g : ai->grad) g += o.grad[0];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.size()));
}

namespace detail {
// Maps every input flat index to its output flat index when `axes` are reduced away.
inline std::pair<Shape, std::vector<std::size_t>> reduction_map(const Shape& shape, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw InvalidArgument("reduce: axis " + std::to_string(ax) + " out of range for shape " + shape_str(shape));
    }
  }
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) reduced[ax] = true;
  Shape out_shape;
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (!reduced[d]) out_shape.push_back(shape[d]);

  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (reduced[d]) continue;
    out_stride[d] = stride;
    stride *= shape[d];
  }
  const std::size_t n = numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
    map[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return {out_shape, map};
}
}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  auto [out_shape, map] = detail::reduction_map(a.shape(), axes);
  std::vector<T> y(numel(out_shape), T(0));
  for (std::size_t i = 0; i < map.size(); ++i) y[map[i]] += a[i];
  Tensor<T> out(out_shape, std::move(y));
  auto ai = a.impl();
  detail::attach<T>(out, "sum_axes", {ai}, [ai, map = std::move(map)](const TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < map.size(); ++i) ai->grad[i] += o.grad[map[i]];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  Tensor<T> s = sum(a, axes);
  return mul_scalar(s, static_cast<T>(s.size()) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size()) {
    throw InvalidShape("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
  }
  Tensor<T> out(std::move(new_shape), a.values());
  auto ai = a.impl();
  detail::attach<T>(out, "reshape", {ai}, [ai](const TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
  });
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no parts");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw InvalidArgument("concat: axis " + std::to_string(axis) + " out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw InvalidShape("concat: part shape " + shape_str(s) + " incompatible with " + shape_str(first));
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<T> y(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().begin() + o * block, block, y.begin() + o * total * inner + offset);
    offsets.push_back(offset);
    offset += block;
  }
  Tensor<T> out(out_shape, std::move(y));
  std::vector<detail::ImplPtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.impl());
  detail::attach<T>(out, "concat", inputs, [inputs, offsets, outer, inner, total, axis](const TensorImpl<T>& o) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto& p = *inputs[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      const std::size_t block = p.shape[axis] * inner;
      for (std::size_t b = 0; b < outer; ++b) {
        const T* src = o.grad.data() + b * total * inner + offsets[k];
        T* dst = p.grad.data() + b * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

/// The sub-range [start, start + length) of `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank()) throw InvalidArgument("slice: axis out of range");
  if (length == 0 || start + length > a.dim(axis)) {
    throw InvalidShape("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                       ") exceeds extent " + std::to_string(a.dim(axis)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t extent = a.dim(axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<T> y(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.values().begin() + (o * extent + start) * inner, length * inner, y.begin() + o * length * inner);
  Tensor<T> out(out_shape, std::move(y));
  auto ai = a.impl();
  detail::attach<T>(out, "slice", {ai}, [ai, outer, inner, extent, start, length](const TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t b = 0; b < outer; ++b)
      for (std::size_t i = 0; i < length * inner; ++i)
        ai->grad[(b * extent + start) * inner + i] += o.grad[b * length * inner + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Accumulates d loss / d leaf into every requires_grad leaf reachable from `loss`.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.rank() != 0) {
    throw InvalidArgument("backward: loss must have shape [], got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw InvalidArgument("backward: loss is not part of a differentiable graph");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{loss.impl().get(), 0}};
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl<T>* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  // Interior gradients are per-call scratch; leaves accumulate across calls.
  for (auto* impl : order) {
    if (impl->node) impl->grad.assign(impl->data.size(), T(0));
  }
  TensorImpl<T>* root = loss.impl().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->node) (*it)->node->backward(**it);
  }
}

/// Central finite differences of a scalar function of one tensor.
template <class T, class F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw InvalidArgument("finite_diff_grad: step must be positive");
  NoGradGuard guard;
  Tensor<T> probe = x.detach();
  Tensor<T> grad(x.shape(), T(0));
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe.data()[i] = saved + h;
    const T up = static_cast<T>(f(probe));
    probe.data()[i] = saved - h;
    const T down = static_cast<T>(f(probe));
    probe.data()[i] = saved;
    grad.data()[i] = (up - down) / (T(2) * h);
  }
  return grad;
}

}  // namespace tscnn
