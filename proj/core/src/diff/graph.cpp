#include "qdwi/diff/graph.hpp"

#include <unordered_set>

namespace qdwi::diff {

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value, std::string name) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->name = std::move(name);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value, std::string name) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->name = std::move(name);
  node->requires_grad = true;
  return Var(std::move(node));
}

namespace {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; graphs can be deep enough to matter.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& node, const char* what) {
  if (!t.all_finite()) {
    throw NonFiniteError(node, std::string("non-finite ") + what + " at node '" + node + "'");
  }
}

}  // namespace

template <typename T>
void backward(const Var<T>& output) {
  if (output.value().size() != 1) {
    throw FormatError("gradient evaluation requires a scalar output, got shape " +
                      shape_str(output.shape()));
  }
  Node<T>* root = output.node();
  if (!root->requires_grad) {
    check_finite(root->value, root->name, "value");
    return;
  }
  // Inputs precede consumers, so the first failure names the node where the
  // non-finite value originated.
  auto order = topo_order(root);
  for (Node<T>* n : order) check_finite(n->value, n->name, "value");

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->leaf) continue;
    if (!n->grad.empty()) {
      check_finite(n->grad, n->name, "gradient");
      if (n->backward) n->backward(*n);
    }
    n->grad = Tensor<T>();
  }
  for (Node<T>* n : order) {
    if (n->leaf && !n->grad.empty()) check_finite(n->grad, n->name, "gradient");
  }
}

template class Var<float>;
template class Var<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace qdwi::diff
