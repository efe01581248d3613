#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dir3d/errors.hpp"

namespace dir3d {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::uint64_t id = 0;  // creation order; inputs always have smaller ids than outputs
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

std::uint64_t next_node_id();
bool grad_enabled();

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major N-d array with an optional node on the gradient tape.
///
/// Tensor is a shared handle: copies alias the same buffer. Values are
/// treated as immutable once an operation has consumed them; the only
/// sanctioned in-place writers are parameter updates and checkpoint loads,
/// which go through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value);
  /// Leaf that accumulates a gradient on backward().
  static Tensor parameter(Shape shape, std::vector<T> data);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient as a detached tensor; zeros if nothing reached this node.
  Tensor grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Operation plumbing.
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  const NodePtr& node() const { return node_; }
  /// Output of an op: records parents and the backward rule when any parent requires grad.
  static Tensor from_op(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                        std::function<void(detail::Node<T>&)> backward_fn);

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dir3d
