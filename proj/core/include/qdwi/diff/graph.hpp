#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qdwi/diff/tensor.hpp"

namespace qdwi::diff {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// One value in the computation graph. `backward` reads `grad` and adds the
/// contribution of this node into the `grad` of each input that requires it.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<NodePtr<T>> inputs;
  std::function<void(Node&)> backward;
  std::string name;
  bool requires_grad = false;
  bool leaf = true;

  /// Gradient buffer, zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool wants_grad(std::size_t input) const { return inputs[input]->requires_grad; }
};

/// Handle to a graph node: the differentiable array.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value, std::string name = "const");
  static Var parameter(Tensor<T> value, std::string name);

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  T item() const { return node_->value.item(); }

  Node<T>* node() const { return node_.get(); }
  const NodePtr<T>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  void zero_grad() { node_->grad = Tensor<T>(); }

 private:
  NodePtr<T> node_;
};

/// Builds an interior node. If no input requires a gradient the result is a
/// detached constant and the backward closure is dropped.
template <typename T>
Var<T> make_node(std::string name, Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->name = std::move(name);
  node->leaf = false;
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.ptr());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar output. Leaf gradients accumulate;
/// interior gradients are released once consumed.
/// Throws FormatError for non-scalar outputs and NonFiniteError (with the
/// node name) when any visited value or gradient is NaN/Inf.
template <typename T>
void backward(const Var<T>& output);

extern template class Var<float>;
extern template class Var<double>;
extern template void backward<float>(const Var<float>&);
extern template void backward<double>(const Var<double>&);

}  // namespace qdwi::diff
