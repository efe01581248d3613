#include "dir3d/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace dir3d {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

namespace {
std::atomic<std::uint64_t> g_node_counter{1};
thread_local bool t_grad_enabled = true;
}  // namespace

std::uint64_t next_node_id() { return g_node_counter.fetch_add(1, std::memory_order_relaxed); }
bool grad_enabled() { return t_grad_enabled; }

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{1}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<detail::Node<T>>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(numel(shape)) +
                         " elements, got " + std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> data) {
  Tensor t(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_to_string(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for " + shape_to_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
Tensor<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return Tensor(node_->shape, T(0));
  return Tensor(node_->shape, node_->grad);
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_to_string(shape()));
  if (!node_->requires_grad) return;

  // Collect the live subgraph and replay it in reverse creation order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

  node_->grad_buffer()[0] += T(1);
  for (auto* n : order) {
    if (!n->backward_fn || n->grad.empty()) continue;
    n->backward_fn(*n);
    // Interior gradients are not needed once propagated.
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t(node_->shape, node_->data);
  t.node_->requires_grad = node_->requires_grad && !node_->backward_fn;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                             std::function<void(detail::Node<T>&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!detail::grad_enabled()) return out;
  bool any = false;
  for (auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template class Tensor<float>;
template class Tensor<double>;
template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);

}  // namespace dir3d
