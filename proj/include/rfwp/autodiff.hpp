// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation.
//
// A Var is a handle to a Node holding a value tensor. When a Tape is active on
// the current thread and an operation receives at least one input that
// requires a gradient, the result node is appended to the tape together with
// a closure that routes the result's gradient back to its inputs. Tapes are
// single-threaded; concurrent shards each use their own tape and reduce
// parameter gradients afterwards in a fixed order.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "rfwp/tensor.hpp"

namespace rfwp {

template <typename T>
class Parameter;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  // Leaves keep their gradient after backward; intermediates release it.
  bool leaf = false;
  std::uint64_t tape_id = 0;
  Parameter<T>* param = nullptr;
  // Reads this node's grad (and value when needed) and accumulates into the
  // inputs captured by the closure.
  std::function<void(Node&)> backward;

  // Zero-initialised on first use.
  T* grad_data() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad.data();
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool recorded() const noexcept { return node_ && node_->tape_id != 0; }

  // Empty when no gradient reached this node.
  const Tensor<T>& grad() const { return node_->grad; }

  // Same value, no history.
  Var detach() const { return Var(node_->value); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> init)
      : name_(std::move(name)), node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(init);
    grad_ = Tensor<T>(node_->value.shape());
  }
  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;

  const std::string& name() const noexcept { return name_; }
  Tensor<T>& value() noexcept { return node_->value; }
  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& grad() noexcept { return grad_; }
  const Tensor<T>& grad() const noexcept { return grad_; }
  std::size_t size() const noexcept { return node_->value.size(); }
  void zero_grad() { grad_.fill(T(0)); }

  // Untracked handle sharing this parameter's storage.
  Var<T> constant() const { return Var<T>(node_); }

 private:
  std::string name_;
  std::shared_ptr<Node<T>> node_;
  Tensor<T> grad_;
};

template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Tracked copy of a parameter; repeated calls return the same node.
  Var<T> param(Parameter<T>& p);
  // Tracked leaf whose gradient survives backward.
  Var<T> leaf(Tensor<T> value);

  void record(const std::shared_ptr<Node<T>>& node);

  // Reverse sweep from a scalar loss. Every recorded node is visited once,
  // newest first. Leaf gradients accumulate across calls.
  void backward(const Var<T>& loss);

  // Moves tracked parameter gradients into Parameter::grad (adding), in the
  // order the parameters were first used on this tape.
  void flush_parameter_grads();

  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t id() const noexcept { return id_; }
  void clear();

  static Tape* active() noexcept;
  static void set_active(Tape* tape) noexcept;

 private:
  std::uint64_t id_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::vector<std::pair<Parameter<T>*, std::shared_ptr<Node<T>>>> params_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_index_;
};

// Makes a tape active on this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) {
    Tape<T>::set_active(&tape);
  }
  ~TapeScope() { Tape<T>::set_active(previous_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Disables recording for the scope's lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::set_active(nullptr); }
  ~NoGradScope() { Tape<T>::set_active(previous_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Tracked parameter when a tape is active, otherwise the raw parameter value.
template <typename T>
Var<T> use(Parameter<T>& p) {
  Tape<T>* tape = Tape<T>::active();
  return tape ? tape->param(p) : p.constant();
}

// Backpropagates through the active tape and accumulates into every tracked
// parameter's gradient. Throws UsageError if the loss was not recorded there.
template <typename T>
void backward(const Var<T>& loss);

// True when an op over these inputs must be recorded.
template <typename T>
bool tracking(std::initializer_list<const Var<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Var<T>* in : inputs) {
    if (in->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool tracking(std::span<const Var<T>> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Var<T>& in : inputs) {
    if (in.requires_grad()) return true;
  }
  return false;
}

// Wraps an op result; the closure is only kept when `track` is set.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, bool track, Backward&& backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (track) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward_fn);
    Tape<T>::active()->record(node);
  }
  return Var<T>(std::move(node));
}

// Gradient buffer of an op input, or nullptr when it does not need one.
template <typename T>
T* grad_of(const Var<T>& v) {
  return v.requires_grad() ? v.node()->grad_data() : nullptr;
}

}  // namespace rfwp
