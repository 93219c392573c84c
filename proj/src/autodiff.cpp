// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/autodiff.hpp"

#include <atomic>

namespace rfwp {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <typename T>
Tape<T>::~Tape() {
  if (active() == this) set_active(nullptr);
}

template <typename T>
Tape<T>* Tape<T>::active() noexcept {
  return active_slot<T>();
}

template <typename T>
void Tape<T>::set_active(Tape* tape) noexcept {
  active_slot<T>() = tape;
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  auto it = param_index_.find(&p);
  if (it != param_index_.end()) return Var<T>(params_[it->second].second);
  auto node = std::make_shared<Node<T>>();
  node->value = p.value();
  node->requires_grad = true;
  node->leaf = true;
  node->param = &p;
  record(node);
  param_index_.emplace(&p, params_.size());
  params_.emplace_back(&p, node);
  return Var<T>(node);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->leaf = true;
  record(node);
  return Var<T>(node);
}

template <typename T>
void Tape<T>::record(const std::shared_ptr<Node<T>>& node) {
  node->tape_id = id_;
  nodes_.push_back(node);
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.defined() || !loss.recorded() || loss.node()->tape_id != id_) {
    throw UsageError("backward: loss was not recorded on this tape");
  }
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     shape_string(loss.shape()));
  }
  Node<T>& root = *loss.node();
  root.grad_data()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& node = **it;
    if (node.grad.size() == 0) continue;
    if (node.backward) node.backward(node);
    if (!node.leaf) node.grad = Tensor<T>();
  }
}

template <typename T>
void Tape<T>::flush_parameter_grads() {
  for (const auto& [param, node] : params_) {
    if (node->grad.size() == 0) continue;
    T* dst = param->grad().data();
    const T* src = node->grad.data();
    for (std::size_t i = 0; i < node->grad.size(); ++i) dst[i] += src[i];
    node->grad = Tensor<T>();
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  params_.clear();
  param_index_.clear();
}

template <typename T>
void backward(const Var<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw UsageError("backward: no active tape");
  tape->backward(loss);
  tape->flush_parameter_grads();
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace rfwp
