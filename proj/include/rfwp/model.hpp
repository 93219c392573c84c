// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Auto-regressive sequence models: a pre-LN residual stack of FWP layers and
// feedforward blocks, or a single-layer LSTM baseline.

#pragma once

#include <json.hpp>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rfwp/fwp.hpp"

namespace rfwp {

enum class Arch { Stack, Lstm };
enum class Positional { None, Sinusoidal };

struct ModelSpec {
  Arch arch = Arch::Stack;
  Variant variant = Variant::Delta;
  std::size_t n_layers = 2;
  std::size_t d_model = 128;
  std::size_t heads = 8;
  std::size_t ffn_dim = 256;
  std::size_t mlp_depth = 1;   // DeltaMlp only
  std::size_t embed_dim = 128; // Lstm only
  double dropout = 0.0;
  std::size_t vocab_in = 0;
  std::size_t vocab_out = 0;
  Positional positional = Positional::None;

  // Throws DimensionError/UsageError on an inconsistent spec.
  void validate() const;
  LayerSpec layer_spec() const;

  // Canonical form: fixed key order, no whitespace.
  nlohmann::ordered_json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  bool operator==(const ModelSpec&) const = default;
};

// Exact trainable parameter total from the closed form.
std::size_t param_count(const ModelSpec& spec);

template <typename T>
struct ModelState {
  std::size_t batch = 0;
  std::size_t position = 0;  // tokens already consumed per sequence
  std::vector<FastState<T>> layers;
  Var<T> lstm_h, lstm_c;

  std::size_t bytes() const;
  ModelState detached() const;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <typename T>
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);
  // Layers keep references into the parameter set.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const noexcept { return spec_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

  ModelState<T> initial_state(std::size_t batch) const;

  // tokens holds T*B ids, time-major (index t*B + b). Returns logits
  // [T*B, vocab_out] and advances `state`. Throws std::out_of_range for ids
  // outside the input vocabulary.
  Var<T> forward(std::span<const int> tokens, ModelState<T>& state,
                 const ForwardOptions& options = {});

 private:
  Var<T> forward_stack(const Var<T>& x, ModelState<T>& state, DropoutStream& drop);
  Var<T> forward_lstm(const Var<T>& x, ModelState<T>& state, DropoutStream& drop);

  struct Block {
    std::unique_ptr<FwpLayer<T>> fwp;
    Parameter<T>* ln1_g;
    Parameter<T>* ln1_b;
    Parameter<T>* w_o;
    Parameter<T>* ln2_g;
    Parameter<T>* ln2_b;
    Parameter<T>* ffn_in;
    Parameter<T>* ffn_out;
  };

  ModelSpec spec_;
  ParameterSet<T> params_;
  Parameter<T>* embed_ = nullptr;
  std::vector<Block> blocks_;
  Parameter<T>* ln_f_g_ = nullptr;
  Parameter<T>* ln_f_b_ = nullptr;
  Parameter<T>* lstm_ih_ = nullptr;
  Parameter<T>* lstm_hh_ = nullptr;
  Parameter<T>* lstm_bias_ = nullptr;
  Parameter<T>* head_w_ = nullptr;
  Parameter<T>* head_b_ = nullptr;
};

// Sinusoidal position table rows [start, start + count).
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t start, std::size_t count, std::size_t dim);

}  // namespace rfwp
