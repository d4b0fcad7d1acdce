#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "utc/tensor.hpp"

namespace utc::ad {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
/// tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->node(id_).value; }
  /// Gradient buffer, empty when the node never received a gradient.
  const std::vector<T>& grad() const { return tape_->node(id_).grad; }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
struct Node {
  const char* op = "leaf";
  Tensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // Receives the node's own id; pushes gradient into its inputs.
  std::function<void(std::size_t)> backward;
};

/// The computation record: nodes in creation order, which is a topological
/// order of the graph. One tape per worker; never shared across threads.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    value.require_rank2();
    Node<T> n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> variable(Tensor<T> value) { return leaf(std::move(value), true); }

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad,
              std::function<void(std::size_t)> backward) {
    Node<T> n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Node<T>& node(std::size_t id) { return nodes_.at(id); }
  const Node<T>& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated as zeros on first use. Returns
  /// nullptr when the node does not require gradients.
  T* grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad.data();
  }

  /// Reverse sweep from a scalar loss. Clears all previously accumulated
  /// gradients first, so repeated calls give identical results.
  void backward(Var<T> loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const auto& lv = node(loss.id()).value;
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!node(loss.id()).requires_grad) return;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(i);
    }
  }

 private:
  std::vector<Node<T>> nodes_;
};

template <class T>
Tape<T>* common_tape(std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw std::invalid_argument("operation on an unbound Var");
    if (tape && v.tape() != tape) throw std::invalid_argument("operands recorded on different tapes");
    tape = v.tape();
  }
  return tape;
}

}  // namespace utc::ad
