// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/model.hpp"

#include <array>
#include <cmath>

namespace rfwp {

namespace {

std::string arch_name(Arch a) { return a == Arch::Lstm ? "lstm" : "stack"; }

Arch parse_arch(const std::string& s) {
  if (s == "stack") return Arch::Stack;
  if (s == "lstm") return Arch::Lstm;
  throw UsageError("unknown architecture: " + s);
}

std::string positional_name(Positional p) {
  return p == Positional::Sinusoidal ? "sinusoidal" : "none";
}

Positional parse_positional(const std::string& s) {
  if (s == "none") return Positional::None;
  if (s == "sinusoidal") return Positional::Sinusoidal;
  throw UsageError("unknown positional encoding: " + s);
}

}  // namespace

void ModelSpec::validate() const {
  if (vocab_in == 0 || vocab_out == 0) throw DimensionError("vocabulary sizes must be positive");
  if (d_model == 0) throw DimensionError("d_model must be positive");
  if (arch == Arch::Lstm) {
    if (n_layers != 1) throw UsageError("the LSTM baseline has exactly one layer");
    if (embed_dim == 0) throw DimensionError("embed_dim must be positive");
    return;
  }
  if (n_layers == 0) throw DimensionError("n_layers must be positive");
  if (ffn_dim == 0) throw DimensionError("ffn_dim must be positive");
  if (positional == Positional::Sinusoidal && variant != Variant::Softmax) {
    throw UsageError("sinusoidal positions are only used by the softmax baseline");
  }
  layer_spec().validate();
}

LayerSpec ModelSpec::layer_spec() const {
  LayerSpec s;
  s.variant = variant;
  s.d_in = s.d_key = s.d_out = d_model;
  s.heads = heads;
  s.mlp_depth = mlp_depth;
  s.ffn_dim = ffn_dim;
  s.dropout = dropout;
  return s;
}

nlohmann::ordered_json ModelSpec::to_json() const {
  nlohmann::ordered_json j;
  j["arch"] = arch_name(arch);
  j["variant"] = std::string(variant_name(variant));
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["heads"] = heads;
  j["ffn_dim"] = ffn_dim;
  j["mlp_depth"] = mlp_depth;
  j["embed_dim"] = embed_dim;
  j["dropout"] = dropout;
  j["vocab_in"] = vocab_in;
  j["vocab_out"] = vocab_out;
  j["positional"] = positional_name(positional);
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.arch = parse_arch(j.at("arch").get<std::string>());
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.n_layers = j.at("n_layers").get<std::size_t>();
    s.d_model = j.at("d_model").get<std::size_t>();
    s.heads = j.at("heads").get<std::size_t>();
    s.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    s.mlp_depth = j.at("mlp_depth").get<std::size_t>();
    s.embed_dim = j.at("embed_dim").get<std::size_t>();
    s.dropout = j.at("dropout").get<double>();
    s.vocab_in = j.at("vocab_in").get<std::size_t>();
    s.vocab_out = j.at("vocab_out").get<std::size_t>();
    s.positional = parse_positional(j.at("positional").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed model spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::size_t param_count(const ModelSpec& s) {
  s.validate();
  const std::size_t d = s.d_model;
  const std::size_t head = d * s.vocab_out + s.vocab_out;
  if (s.arch == Arch::Lstm) {
    return s.vocab_in * s.embed_dim + 4 * d * (s.embed_dim + d) + 4 * d + head;
  }
  const std::size_t block = slow_param_count(s.layer_spec()) + d * d + 2 * d * s.ffn_dim + 4 * d;
  return s.vocab_in * d + s.n_layers * block + 2 * d + head;
}

template <typename T>
std::size_t ModelState<T>::bytes() const {
  std::size_t total = 0;
  for (const auto& l : layers) total += l.bytes();
  if (lstm_h.defined()) total += lstm_h.value().bytes() + lstm_c.value().bytes();
  return total;
}

template <typename T>
ModelState<T> ModelState<T>::detached() const {
  ModelState out;
  out.batch = batch;
  out.position = position;
  for (const auto& l : layers) out.layers.push_back(l.detached());
  if (lstm_h.defined()) {
    out.lstm_h = lstm_h.detach();
    out.lstm_c = lstm_c.detach();
  }
  return out;
}

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t start, std::size_t count, std::size_t dim) {
  Tensor<T> pe(Shape{count, dim});
  for (std::size_t p = 0; p < count; ++p) {
    const double pos = static_cast<double>(start + p);
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      pe.at(p, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < dim) pe.at(p, i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Model<T>::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  const std::size_t d = spec_.d_model;
  if (spec_.arch == Arch::Lstm) {
    embed_ = &params_.add_uniform("embed", Shape{spec_.vocab_in, spec_.embed_dim}, rng);
    lstm_ih_ = &params_.add_uniform("lstm.W_ih", Shape{4 * d, spec_.embed_dim}, rng);
    lstm_hh_ = &params_.add_uniform("lstm.W_hh", Shape{4 * d, d}, rng);
    lstm_bias_ = &params_.add_uniform("lstm.bias", Shape{4 * d}, rng);
  } else {
    embed_ = &params_.add_uniform("embed", Shape{spec_.vocab_in, d}, rng);
    const LayerSpec layer = spec_.layer_spec();
    for (std::size_t i = 0; i < spec_.n_layers; ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      Block b;
      b.ln1_g = &params_.add_filled(p + "ln1.gain", Shape{d}, T(1));
      b.ln1_b = &params_.add_filled(p + "ln1.bias", Shape{d}, T(0));
      b.fwp = std::make_unique<FwpLayer<T>>(layer, params_, p + "fwp.", rng);
      b.w_o = &params_.add_uniform(p + "W_o", Shape{d, d}, rng);
      b.ln2_g = &params_.add_filled(p + "ln2.gain", Shape{d}, T(1));
      b.ln2_b = &params_.add_filled(p + "ln2.bias", Shape{d}, T(0));
      b.ffn_in = &params_.add_uniform(p + "ffn.W_in", Shape{spec_.ffn_dim, d}, rng);
      b.ffn_out = &params_.add_uniform(p + "ffn.W_out", Shape{d, spec_.ffn_dim}, rng);
      blocks_.push_back(std::move(b));
    }
    ln_f_g_ = &params_.add_filled("ln_f.gain", Shape{d}, T(1));
    ln_f_b_ = &params_.add_filled("ln_f.bias", Shape{d}, T(0));
  }
  head_w_ = &params_.add_uniform("head.W", Shape{spec_.vocab_out, d}, rng);
  head_b_ = &params_.add_filled("head.b", Shape{spec_.vocab_out}, T(0));
}

template <typename T>
ModelState<T> Model<T>::initial_state(std::size_t batch) const {
  if (batch == 0) throw UsageError("batch must be positive");
  ModelState<T> state;
  state.batch = batch;
  if (spec_.arch == Arch::Lstm) {
    state.lstm_h = Var<T>(Tensor<T>(Shape{batch, spec_.d_model}));
    state.lstm_c = Var<T>(Tensor<T>(Shape{batch, spec_.d_model}));
    return state;
  }
  for (const auto& b : blocks_) state.layers.push_back(b.fwp->initial_state(batch));
  return state;
}

template <typename T>
Var<T> Model<T>::forward(std::span<const int> tokens, ModelState<T>& state,
                         const ForwardOptions& options) {
  if (state.batch == 0) throw UsageError("forward on an uninitialised model state");
  if (tokens.empty() || tokens.size() % state.batch != 0) {
    throw DimensionError("token count must be a positive multiple of the batch size");
  }
  DropoutStream drop{options.dropout_seed, 0, options.training};
  const std::size_t steps = tokens.size() / state.batch;
  Var<T> x = embedding(use(*embed_), tokens);
  if (spec_.positional == Positional::Sinusoidal) {
    const Tensor<T> pe = sinusoidal_positions<T>(state.position, steps, spec_.d_model);
    Tensor<T> rows(Shape{tokens.size(), spec_.d_model});
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t b = 0; b < state.batch; ++b) {
        std::copy(pe.data() + t * spec_.d_model, pe.data() + (t + 1) * spec_.d_model,
                  rows.data() + (t * state.batch + b) * spec_.d_model);
      }
    }
    x = x + Var<T>(std::move(rows));
  }
  x = dropout(x, spec_.dropout, drop);
  Var<T> logits = spec_.arch == Arch::Lstm ? forward_lstm(x, state, drop)
                                           : forward_stack(x, state, drop);
  state.position += steps;
  return logits;
}

template <typename T>
Var<T> Model<T>::forward_stack(const Var<T>& input, ModelState<T>& state, DropoutStream& drop) {
  Var<T> x = input;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    const Var<T> h = layernorm(x, use(*b.ln1_g), use(*b.ln1_b));
    const Var<T> a = linear(b.fwp->forward(h, state.layers[i]), use(*b.w_o));
    x = x + dropout(a, spec_.dropout, drop);
    const Var<T> h2 = layernorm(x, use(*b.ln2_g), use(*b.ln2_b));
    const Var<T> f = linear(relu(linear(h2, use(*b.ffn_in))), use(*b.ffn_out));
    x = x + dropout(f, spec_.dropout, drop);
  }
  x = layernorm(x, use(*ln_f_g_), use(*ln_f_b_));
  return add_row(linear(x, use(*head_w_)), use(*head_b_));
}

template <typename T>
Var<T> Model<T>::forward_lstm(const Var<T>& x, ModelState<T>& state, DropoutStream& drop) {
  const std::size_t d = spec_.d_model, batch = state.batch;
  const std::size_t steps = x.shape()[0] / batch;
  const Var<T> pre = linear(x, use(*lstm_ih_));
  const Var<T> w_hh = use(*lstm_hh_), bias = use(*lstm_bias_);
  Var<T> h = state.lstm_h, c = state.lstm_c;
  std::vector<Var<T>> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Var<T> a = add_row(slice_rows(pre, t * batch, batch) + linear(h, w_hh), bias);
    const Var<T> i = sigmoid(slice_cols(a, 0, d));
    const Var<T> f = sigmoid(slice_cols(a, d, d));
    const Var<T> g = tanh(slice_cols(a, 2 * d, d));
    const Var<T> o = sigmoid(slice_cols(a, 3 * d, d));
    c = f * c + i * g;
    h = o * tanh(c);
    hs.push_back(h);
  }
  state.lstm_h = h;
  state.lstm_c = c;
  const Var<T> out = hs.size() == 1 ? hs[0] : concat_rows<T>(hs);
  return add_row(linear(dropout(out, spec_.dropout, drop), use(*head_w_)), use(*head_b_));
}

template struct ModelState<float>;
template struct ModelState<double>;
template class Model<float>;
template class Model<double>;
template Tensor<float> sinusoidal_positions<float>(std::size_t, std::size_t, std::size_t);
template Tensor<double> sinusoidal_positions<double>(std::size_t, std::size_t, std::size_t);

}  // namespace rfwp
