#include "tadt/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "tadt/errors.hpp"

namespace tadt {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_mac_total = 0;

void check_shape(const Shape& shape, std::size_t data_size) {
  if (shape.size() > kMaxRank) {
    throw DimensionError("tensor rank " + std::to_string(shape.size()) +
                         " exceeds the supported maximum of 4: " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data_size) {
    throw DimensionError("data length " + std::to_string(data_size) +
                         " does not match shape " + shape_to_string(shape));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void MacCounter::add(std::uint64_t macs) { g_mac_total += macs; }
std::uint64_t MacCounter::total() { return g_mac_total; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  check_shape(shape, data.size());
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_op(Shape shape, std::vector<T> data, const char* op,
                             const std::vector<Tensor>& parents, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data), false);
  out.node_->op = op;
  if (!GradMode::enabled()) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.defined() && p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const Tensor& p : parents) {
    if (p.defined() && p.requires_grad()) out.node_->parents.push_back(p.node_);
  }
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() requires a single-element tensor, got " + shape_to_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) const {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = value;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (defined() ? shape_to_string(shape()) : std::string("undefined tensor")));
  }
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
  Graph<T> graph(*this);
  graph.reverse_pass();
}

template <typename T>
Graph<T>::Graph(const Tensor<T>& root) : root_(root.node().get()) {
  // Iterative post-order DFS; a node is emitted after all of its parents.
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root_, 0);
  visited.insert(root_);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void Graph<T>::reverse_pass() {
  for (detail::Node<T>* node : order_) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T(0));
  }
  root_->grad_buffer()[0] += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->is_leaf()) continue;
    node->backward(node->grad);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace tadt
