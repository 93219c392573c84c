// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for unit and acceptance tests.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rfwp/fwp.hpp"

namespace rfwp::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Rows b, b+B, b+2B, ... of a time-major [T*B, d] tensor.
oracle::Vec row_of(const Tensor<double>& x, std::size_t row);
std::vector<oracle::Vec> sequence_of(const Tensor<double>& x, std::size_t batch, std::size_t b);

double max_abs_diff(const std::vector<oracle::Vec>& a, const std::vector<oracle::Vec>& b);
double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b);

struct GradCheck {
  bool ok = true;
  double worst_relative = 0.0;  // largest per-tensor ||a - n|| / max(||a||, ||n||)
  std::string worst_name;
  std::size_t checked = 0;
};

// Compares taped gradients of every parameter against central differences.
// Per tensor the relative error must stay below `tol`, and every element must
// satisfy |a - n| <= tol * max(|a|, |n|) + abs_floor.
GradCheck check_parameter_gradients(ParameterSet<double>& params,
                                    const std::function<Var<double>()>& loss_fn,
                                    double h = 1e-5, double tol = 1e-3, double abs_floor = 1e-7);

// Same check for the gradient of fn(x) with respect to the input tensor.
GradCheck check_input_gradient(const Tensor<double>& x,
                               const std::function<Var<double>(const Var<double>&)>& fn,
                               double h = 1e-5, double tol = 1e-4, double abs_floor = 1e-8);

// Loss = sum(y * weights) with fixed random weights, a generic scalar head.
Tensor<double> projection_weights(const Shape& shape, std::uint64_t seed);

}  // namespace rfwp::testing
