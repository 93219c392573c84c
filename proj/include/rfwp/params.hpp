// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "rfwp/autodiff.hpp"
#include "rfwp/rng.hpp"

namespace rfwp {

// Owns trainable parameters in declaration order. The order is part of the
// checkpoint format.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init) {
    if (find(name)) throw UsageError("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(init)));
    return *params_.back();
  }

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = last dimension.
  Parameter<T>& add_uniform(std::string name, Shape shape, Rng& rng) {
    Tensor<T> init(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(init.cols()));
    for (T& v : init.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(std::move(name), std::move(init));
  }

  Parameter<T>& add_filled(std::string name, Shape shape, T value) {
    return add(std::move(name), Tensor<T>::filled(std::move(shape), value));
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_) {
      if (p->name() == name) return p.get();
    }
    return nullptr;
  }

  Parameter<T>& at(std::string_view name) {
    if (Parameter<T>* p = find(name)) return *p;
    throw UsageError("unknown parameter: " + std::string(name));
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

}  // namespace rfwp
