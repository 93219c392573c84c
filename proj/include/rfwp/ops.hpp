// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Row-wise ops treat the last axis as columns and
// every leading axis as rows.
//
// Fast weights are stored per head as a stack of matrices W with shape
// [B*H, m, n]; the vectors that read or write them are [B, H*n] rows holding
// the H per-head sub-vectors side by side.

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "rfwp/autodiff.hpp"

namespace rfwp {

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x [N, in] times w [out, in] transposed -> [N, out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w);
template <typename T> Var<T> outer(const Var<T>& u, const Var<T>& v);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
// Adds a [cols] vector to every row.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& bias);

template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

// Softmax over consecutive column groups of width `group` (0: whole row),
// stabilised by max subtraction. Throws NumericError on NaN input.
template <typename T> Var<T> softmax(const Var<T>& x, std::size_t group = 0);

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                 T eps = T(1e-5));

// Per-call stream of the counter-based dropout generator.
struct DropoutStream {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
  bool training = false;
};

// Inverted dropout; identity when not training or rate == 0.
template <typename T> Var<T> dropout(const Var<T>& x, double rate, DropoutStream& stream);

template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count);
template <typename T> Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count);
// Picks columns by index (repeats allowed).
template <typename T>
Var<T> gather_cols(const Var<T>& x, std::shared_ptr<const std::vector<std::size_t>> index);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
// Elementwise product with a constant weight tensor, summed to a scalar.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

// Rows of `table` selected by id.
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const int> ids);

// Sum of token negative log-likelihoods divided by `normalizer`; targets < 0
// are ignored.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, T normalizer);

// y[b, h*m:(h+1)*m] = W[b*H+h] x[b, h*n:(h+1)*n].
template <typename T> Var<T> head_matvec(const Var<T>& w, const Var<T>& x);
// W[b*H+h] + a_bh (outer) k_bh.
template <typename T>
Var<T> head_outer_add(const Var<T>& w, const Var<T>& a, const Var<T>& k);
// Fused delta rule per head: W + beta_bh (v_bh - W k_bh) (outer) k_bh, with
// beta [B, H]. The retrieved value uses the old W.
template <typename T>
Var<T> head_delta_update(const Var<T>& w, const Var<T>& k, const Var<T>& v, const Var<T>& beta);
// Scales each head sub-vector of x [B, H*m] by s [B, H].
template <typename T> Var<T> head_scale(const Var<T>& x, const Var<T>& s);

// Causal scaled dot-product attention. q is [Tq*B, d], k and v are
// [Tk*B, d] with time-major rows; query step i sits at absolute key position
// q_offset + i and attends to keys 0..q_offset+i.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::size_t batch, std::size_t heads, std::size_t q_offset);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace rfwp
