#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "diffsr/nn/tensor.hpp"

namespace diffsr::nn {

/// One value in the recorded computation. Interior nodes own a backward closure
/// that reads `grad` and accumulates into each input's grad buffer.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T{0});
    return grad;
  }
};

bool grad_enabled() noexcept;
void set_grad_enabled(bool enabled) noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to a graph node. Copies alias the same node.
template <class T>
class Var {
 public:
  Var() = default;

  static Var constant(Tensor<T> value) {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    return v;
  }

  static Var parameter(Tensor<T> value) {
    Var v = constant(std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T{0});
  }
  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

  /// Reverse sweep from a scalar.
  void backward() const {
    require(node_->value.size() == 1, ErrorKind::ShapeMismatch, "backward() needs a scalar root");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        Node<T>* child = n->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer().fill(T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates the result node of an op. The closure is dropped when no input needs a
/// gradient or recording is disabled.
template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.shared());
    }
  }
  return Var<T>(std::move(node));
}

template <class T>
using ParamList = std::vector<Var<T>>;

template <class T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value().size();
  return n;
}

template <class T>
std::vector<double> flatten_parameters(const ParamList<T>& params) {
  std::vector<double> flat;
  flat.reserve(parameter_count(params));
  for (const auto& p : params)
    for (T v : p.value().span()) flat.push_back(static_cast<double>(v));
  return flat;
}

template <class T, class U>
void assign_parameters(ParamList<T>& params, std::span<const U> flat) {
  require(flat.size() == parameter_count(params), ErrorKind::ShapeMismatch,
          "weight count " + std::to_string(flat.size()) + " does not match architecture (" +
              std::to_string(parameter_count(params)) + ")");
  std::size_t k = 0;
  for (auto& p : params)
    for (T& v : p.mutable_value().span()) v = static_cast<T>(flat[k++]);
}

template <class T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace diffsr::nn
