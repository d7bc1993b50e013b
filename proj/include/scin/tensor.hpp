#pragma once

#include <algorithm>
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

#include "scin/error.hpp"

namespace scin {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded operation. `apply` receives the output gradient and one span
// per input; spans for inputs that do not require grad are empty.
template <typename T>
struct GradNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T>, std::vector<std::span<T>>&)> apply;
  const char* op = "";
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty == no gradient buffer
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;
};

}  // namespace detail

// Dense row-major array with an optional gradient buffer. Copies share
// storage (a handle, like a framework tensor); use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    impl_->data.assign(numel_of(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.assign(numel(), T(0)); }
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor out(shape(), impl_->data);
    return out;
  }

  // Shares nothing with the graph; data is copied.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

  // Builds an op output. The node is attached only when some input needs grad.
  static Tensor from_op(
      Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
      std::function<void(std::span<const T>, std::vector<std::span<T>>&)> apply,
      const char* op) {
    Tensor out(std::move(shape), std::move(values));
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      auto node = std::make_shared<detail::GradNode<T>>();
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.impl_);
      node->apply = std::move(apply);
      node->op = op;
      out.impl_->node = std::move(node);
      out.impl_->requires_grad = true;
    }
    return out;
  }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; interior gradients are rebuilt from zero on every call so repeated
// calls add exactly one more copy of the leaf gradients.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss");
  }
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  // Iterative post-order DFS; the graph is a DAG by construction.
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      Impl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }
  for (Impl* impl : order) {
    if (impl->node) {
      impl->grad.assign(impl->data.size(), T(0));
    } else if (impl->grad.empty()) {
      impl->grad.assign(impl->data.size(), T(0));
    }
  }
  loss.impl()->grad[0] += T(1);
  std::vector<std::span<T>> grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (!impl->node) continue;
    grads.clear();
    for (auto& in : impl->node->inputs) {
      if (in->requires_grad) {
        grads.emplace_back(in->grad);
      } else {
        grads.emplace_back();
      }
    }
    impl->node->apply(std::span<const T>(impl->grad), grads);
  }
}

enum class ParamGroup { Backbone, NormAffine };

inline const char* group_name(ParamGroup g) {
  return g == ParamGroup::Backbone ? "backbone" : "norm_affine";
}

// A named learnable tensor. The handle shares storage with the model.
template <typename T>
struct Parameter {
  std::string id;
  Tensor<T> tensor;
  ParamGroup group = ParamGroup::Backbone;
};

}  // namespace scin
