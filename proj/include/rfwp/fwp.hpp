// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fast Weight Programmer layers. A slow network (trainable projections)
// writes into fast weight matrices at every step; a fast network reads them.
//
// Sequences are processed time-major: the input of a segment is [T*B, d_in]
// with row t*B + b holding step t of batch element b.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rfwp/ops.hpp"
#include "rfwp/params.hpp"

namespace rfwp {

enum class Variant {
  Softmax,
  Linear,
  Delta,
  DeltaRnnA,
  DeltaRnnB,
  DeltaLstmA,
  DeltaLstmB,
  DeltaLstmC,
  DeltaLstmD,
  DeltaMlp,
  Rdn,
  DeltaDelta,
};

enum class UpdateRule { Sum, Delta };

std::string_view variant_name(Variant v);
// Throws UsageError for unknown names.
Variant parse_variant(std::string_view name);
const std::vector<Variant>& all_variants();

bool is_recurrent(Variant v);  // carries a fast or recurrent state (everything but Softmax)
bool is_delta_rnn(Variant v);
bool is_delta_lstm(Variant v);
UpdateRule update_rule(Variant v);

struct LayerSpec {
  Variant variant = Variant::Delta;
  std::size_t d_in = 0;
  std::size_t d_key = 0;
  std::size_t d_out = 0;
  std::size_t heads = 1;
  std::size_t mlp_depth = 1;  // K, DeltaMlp only
  std::size_t ffn_dim = 0;
  double dropout = 0.0;

  // Throws DimensionError on inconsistent sizes.
  void validate() const;
};

// Sizes of the Delta-Delta construction for a single head of width d.
struct DeltaDeltaDims {
  std::size_t d = 0;
  std::pair<std::size_t, std::size_t> slow_matrix;  // d x (5d+2)
  std::pair<std::size_t, std::size_t> fast_outer;   // d x (3d+1)
  std::pair<std::size_t, std::size_t> fast_inner;   // d x d

  static DeltaDeltaDims of(std::size_t d);
};

// Trainable parameter count of one layer, from the closed form.
std::size_t slow_param_count(const LayerSpec& spec);

// Short-term memory of one layer for a batch of sequences.
template <typename T>
struct FastState {
  std::size_t batch = 0;
  std::vector<Var<T>> fast;  // [B*H, m, n] per fast matrix
  Var<T> y_prev;             // [B, d_out]
  Var<T> c_prev;             // [B, d_out], Delta LSTM
  Var<T> keys;               // [t*B, d_key], Softmax
  Var<T> values;             // [t*B, d_out], Softmax

  bool initialized() const noexcept { return batch > 0; }
  std::size_t bytes() const;
  // Same values, no history; used at segment boundaries.
  FastState detached() const;
};

template <typename T>
class FwpLayer {
 public:
  // Registers this layer's slow weights into `params` under `prefix`.
  FwpLayer(const LayerSpec& spec, ParameterSet<T>& params, const std::string& prefix, Rng& rng);

  const LayerSpec& spec() const noexcept { return spec_; }

  FastState<T> initial_state(std::size_t batch) const;

  // x: [T*B, d_in] -> y: [T*B, d_out]. Replaces `state` with the state after
  // the last step. Throws UsageError on an uninitialised state.
  Var<T> forward(const Var<T>& x, FastState<T>& state);

  // One step for a batch: x [B, d_in] -> [B, d_out].
  Var<T> step(const Var<T>& x, FastState<T>& state) { return forward(x, state); }

  // Slow weights in registration order.
  const std::vector<Parameter<T>*>& parameters() const noexcept { return own_; }
  Parameter<T>& param(std::string_view short_name);

 private:
  struct Bank {
    Parameter<T>* wk = nullptr;
    Parameter<T>* wv = nullptr;
    Parameter<T>* wb = nullptr;
    std::size_t m = 0;  // rows per head (value width)
    std::size_t n = 0;  // cols per head (key width)
  };
  struct BankInputs {
    Var<T> k, v, beta;  // whole segment; k already through phi
  };

  Parameter<T>& add(const std::string& name, Shape shape, Rng& rng);
  Bank add_bank(const std::string& tag, std::size_t m_total, std::size_t n_total, bool delta,
                Rng& rng);
  BankInputs bank_inputs(const Bank& bank, const Var<T>& x) const;
  Var<T> write(const Bank& bank, const Var<T>& w, const BankInputs& in, std::size_t t,
               std::size_t batch) const;

  Var<T> forward_softmax(const Var<T>& x, FastState<T>& state, std::size_t steps);
  Var<T> forward_banked(const Var<T>& x, FastState<T>& state, std::size_t steps);
  Var<T> forward_rdn(const Var<T>& x, FastState<T>& state, std::size_t steps);
  Var<T> forward_delta_delta(const Var<T>& x, FastState<T>& state, std::size_t steps);

  LayerSpec spec_;
  std::string prefix_;
  ParameterSet<T>& params_;
  std::vector<Parameter<T>*> own_;
  std::vector<Bank> banks_;
  Parameter<T>* wq_ = nullptr;
  // Recurrent slow weights (RDN), gate biases (Delta LSTM), Delta-Delta slow matrix.
  Parameter<T>* rk_ = nullptr;
  Parameter<T>* rv_ = nullptr;
  Parameter<T>* rq_ = nullptr;
  Parameter<T>* rb_ = nullptr;
  Parameter<T>* bias_f_ = nullptr;
  Parameter<T>* bias_o_ = nullptr;
  Parameter<T>* slow_ = nullptr;
  std::shared_ptr<const std::vector<std::size_t>> dd_index_[4];
};

// Single-matrix forms of the fast weight operations. W is [m, n]; k [n];
// v [m].
template <typename T> Var<T> phi(const Var<T>& k);
template <typename T> Var<T> sum_update(const Var<T>& w, const Var<T>& k, const Var<T>& v);
// Returns (W_new, v_bar) with v_bar = W k from the old W.
template <typename T>
std::pair<Var<T>, Var<T>> delta_update(const Var<T>& w, const Var<T>& k, const Var<T>& v, T beta);

}  // namespace rfwp
