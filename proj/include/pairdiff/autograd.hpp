#pragma once

#include "pairdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pairdiff {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialized on first access.
  Tensor<S>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<S>::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.shape() == value.shape() && !grad.empty(); }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> value, bool requires_grad = false) : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  Tensor<S>& grad() { return node_->grad_buffer(); }
  const Tensor<S>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<S>(); }
  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& ptr() const { return node_; }

  Var detach() const { return Var(node_->value, false); }

  /// Back-propagates from this node. A non-scalar root is seeded with ones.
  void backward() const {
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<S>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->grad_buffer().vec().array() += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<S>* node = *it;
      if (node->backward && node->has_grad()) node->backward(*node);
    }
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Builds an op result. The backward closure is only recorded when grad mode is
/// on and at least one parent requires a gradient.
template <typename S, typename Backward>
Var<S> make_op(Tensor<S> value, std::initializer_list<Var<S>> parents, Backward&& backward) {
  bool needs = false;
  if (detail::grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (!needs) return Var<S>(std::move(value), false);
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  node->requires_grad = true;
  for (const auto& p : parents) node->parents.push_back(p.ptr());
  node->backward = std::forward<Backward>(backward);
  return Var<S>(std::move(node));
}

template <typename S, typename Backward>
Var<S> make_op(Tensor<S> value, const std::vector<Var<S>>& parents, Backward&& backward) {
  bool needs = false;
  if (detail::grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (!needs) return Var<S>(std::move(value), false);
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  node->requires_grad = true;
  for (const auto& p : parents) node->parents.push_back(p.ptr());
  node->backward = std::forward<Backward>(backward);
  return Var<S>(std::move(node));
}

template <typename S>
inline bool wants_grad(const Node<S>& node, std::size_t parent) {
  return node.parents[parent]->requires_grad;
}

template <typename S>
inline Tensor<S>& parent_grad(Node<S>& node, std::size_t parent) {
  return node.parents[parent]->grad_buffer();
}

template <typename S>
inline const Tensor<S>& parent_value(const Node<S>& node, std::size_t parent) {
  return node.parents[parent]->value;
}

}  // namespace pairdiff
