#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations create new
// nodes that remember their parents and a closure that pushes the output
// gradient back into them; Tensor::backward() runs those closures once each
// in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tadt {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
struct DTypeOf;
template <>
struct DTypeOf<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct DTypeOf<double> {
  static constexpr DType value = DType::f64;
};

// Thread-local switch; when off, ops never record parents.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Multiply-accumulate instrumentation. Forward matmul and conv kernels
// report their MAC count here; backward kernels do not.
class MacCounter {
 public:
  static void add(std::uint64_t macs);
  static std::uint64_t total();
};

class MacCountScope {
 public:
  MacCountScope() : start_(MacCounter::total()) {}
  std::uint64_t count() const { return MacCounter::total() - start_; }

 private:
  std::uint64_t start_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<T>&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  using BackwardFn = std::function<void(const std::vector<T>& grad_out)>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Builds the result node of an operation. The backward closure is kept
  // only when grad mode is on and some parent requires grad.
  static Tensor make_op(Shape shape, std::vector<T> data, const char* op,
                        const std::vector<Tensor>& parents, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  DType dtype() const { return DTypeOf<T>::value; }
  const char* op_name() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  // In-place access for initialization and optimizer updates only.
  std::span<T> mutable_data() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) const;
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() const;

  // New leaf holding a copy of the data, no history.
  Tensor detach() const;

  // Reverse pass from a scalar; leaf gradients accumulate across calls.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

// Reverse topological ordering of the grad-requiring part of a graph.
template <typename T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& root);

  // Parents precede children.
  const std::vector<detail::Node<T>*>& order() const { return order_; }

  // Seeds the root gradient with one and runs every closure once.
  void reverse_pass();

 private:
  detail::Node<T>* root_;
  std::vector<detail::Node<T>*> order_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace tadt
