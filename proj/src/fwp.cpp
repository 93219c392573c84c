// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/fwp.hpp"

#include <array>

namespace rfwp {

namespace {

struct VariantInfo {
  Variant variant;
  std::string_view name;
};

constexpr std::array<VariantInfo, 12> kVariants{{
    {Variant::Softmax, "softmax"},
    {Variant::Linear, "linear"},
    {Variant::Delta, "delta"},
    {Variant::DeltaRnnA, "delta_rnn_a"},
    {Variant::DeltaRnnB, "delta_rnn_b"},
    {Variant::DeltaLstmA, "delta_lstm_a"},
    {Variant::DeltaLstmB, "delta_lstm_b"},
    {Variant::DeltaLstmC, "delta_lstm_c"},
    {Variant::DeltaLstmD, "delta_lstm_d"},
    {Variant::DeltaMlp, "delta_mlp"},
    {Variant::Rdn, "rdn"},
    {Variant::DeltaDelta, "delta_delta"},
}};

template <typename T>
Var<T> zeros(Shape shape) {
  return Var<T>(Tensor<T>(std::move(shape)));
}

template <typename T>
Var<T> slice_step(const Var<T>& seq, std::size_t t, std::size_t batch) {
  return slice_rows(seq, t * batch, batch);
}

}  // namespace

std::string_view variant_name(Variant v) {
  for (const auto& info : kVariants) {
    if (info.variant == v) return info.name;
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (const auto& info : kVariants) {
    if (info.name == name) return info.variant;
  }
  throw UsageError("unknown layer variant: " + std::string(name));
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> list = [] {
    std::vector<Variant> out;
    for (const auto& info : kVariants) out.push_back(info.variant);
    return out;
  }();
  return list;
}

bool is_recurrent(Variant v) { return v != Variant::Softmax; }

bool is_delta_rnn(Variant v) { return v == Variant::DeltaRnnA || v == Variant::DeltaRnnB; }

bool is_delta_lstm(Variant v) {
  return v == Variant::DeltaLstmA || v == Variant::DeltaLstmB || v == Variant::DeltaLstmC ||
         v == Variant::DeltaLstmD;
}

UpdateRule update_rule(Variant v) {
  return (v == Variant::Linear || v == Variant::Softmax) ? UpdateRule::Sum : UpdateRule::Delta;
}

void LayerSpec::validate() const {
  if (d_in == 0 || d_key == 0 || d_out == 0 || heads == 0) {
    throw DimensionError("layer dimensions and head count must be positive");
  }
  if (d_key % heads != 0 || d_out % heads != 0) {
    throw DimensionError("d_key (" + std::to_string(d_key) + ") and d_out (" +
                         std::to_string(d_out) + ") must be divisible by heads (" +
                         std::to_string(heads) + ")");
  }
  if (variant == Variant::Softmax && d_key != d_out) {
    throw DimensionError("softmax attention needs d_key == d_out");
  }
  if (variant == Variant::DeltaDelta && (d_in != d_key || d_key != d_out)) {
    throw DimensionError("delta_delta needs d_in == d_key == d_out");
  }
  if (variant == Variant::DeltaMlp && mlp_depth == 0) {
    throw DimensionError("delta_mlp needs at least one fast layer");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw DimensionError("dropout must be in [0, 1)");
}

DeltaDeltaDims DeltaDeltaDims::of(std::size_t d) {
  if (d == 0) throw DimensionError("delta_delta base dimension must be positive");
  return {d, {d, 5 * d + 2}, {d, 3 * d + 1}, {d, d}};
}

std::size_t slow_param_count(const LayerSpec& s) {
  s.validate();
  const std::size_t din = s.d_in, dk = s.d_key, dv = s.d_out, h = s.heads;
  const std::size_t delta_bank = (dk + dv + h) * din;
  const std::size_t r_bank = (2 * dv + h) * din;
  switch (s.variant) {
    case Variant::Softmax:
    case Variant::Linear:
      return (2 * dk + dv) * din;
    case Variant::Delta:
      return dk * din + delta_bank;
    case Variant::DeltaRnnA:
    case Variant::DeltaRnnB:
      return dk * din + delta_bank + r_bank;
    case Variant::DeltaLstmA:
    case Variant::DeltaLstmB:
    case Variant::DeltaLstmC:
    case Variant::DeltaLstmD:
      return dk * din + 3 * delta_bank + 3 * r_bank + 2 * dv;
    case Variant::DeltaMlp:
      return dk * din + delta_bank + (s.mlp_depth - 1) * r_bank;
    case Variant::Rdn:
      return dk * din + delta_bank + (2 * dk + dv + h) * dv;
    case Variant::DeltaDelta:
      return (5 * din + 2 * h) * din;
  }
  return 0;
}

template <typename T>
std::size_t FastState<T>::bytes() const {
  std::size_t total = 0;
  for (const auto& w : fast) total += w.value().bytes();
  for (const Var<T>* v : {&y_prev, &c_prev, &keys, &values}) {
    if (v->defined()) total += v->value().bytes();
  }
  return total;
}

template <typename T>
FastState<T> FastState<T>::detached() const {
  FastState out;
  out.batch = batch;
  for (const auto& w : fast) out.fast.push_back(w.detach());
  if (y_prev.defined()) out.y_prev = y_prev.detach();
  if (c_prev.defined()) out.c_prev = c_prev.detach();
  if (keys.defined()) out.keys = keys.detach();
  if (values.defined()) out.values = values.detach();
  return out;
}

template <typename T>
FwpLayer<T>::FwpLayer(const LayerSpec& spec, ParameterSet<T>& params, const std::string& prefix,
                      Rng& rng)
    : spec_(spec), prefix_(prefix), params_(params) {
  spec_.validate();
  const std::size_t din = spec_.d_in, dk = spec_.d_key, dv = spec_.d_out, h = spec_.heads;
  const Variant v = spec_.variant;
  if (v == Variant::DeltaDelta) {
    slow_ = &add("S", Shape{5 * din + 2 * h, din}, rng);
    const std::size_t dh = din / h, block = 3 * dh + 1;
    for (std::size_t part = 0; part < 4; ++part) {
      auto index = std::make_shared<std::vector<std::size_t>>();
      for (std::size_t head = 0; head < h; ++head) {
        if (part == 3) {
          index->push_back(head * block + 3 * dh);
        } else {
          for (std::size_t j = 0; j < dh; ++j) index->push_back(head * block + part * dh + j);
        }
      }
      dd_index_[part] = std::move(index);
    }
    return;
  }
  wq_ = &add("Wq", Shape{dk, din}, rng);
  const bool delta = update_rule(v) == UpdateRule::Delta;
  if (v == Variant::Softmax || v == Variant::Linear || v == Variant::Delta || v == Variant::Rdn) {
    banks_.push_back(add_bank("", dv, dk, delta, rng));
  } else if (is_delta_rnn(v)) {
    banks_.push_back(add_bank("", dv, dk, true, rng));
    banks_.push_back(add_bank("_r", dv, dv, true, rng));
  } else if (is_delta_lstm(v)) {
    for (const char* gate : {"_u", "_f", "_o"}) banks_.push_back(add_bank(gate, dv, dk, true, rng));
    for (const char* gate : {"_ru", "_rf", "_ro"}) {
      banks_.push_back(add_bank(gate, dv, dv, true, rng));
    }
    bias_f_ = &params_.add_filled(prefix_ + "b_f", Shape{dv}, T(1));
    bias_o_ = &params_.add_filled(prefix_ + "b_o", Shape{dv}, T(0));
    own_.push_back(bias_f_);
    own_.push_back(bias_o_);
  } else if (v == Variant::DeltaMlp) {
    for (std::size_t i = 0; i < spec_.mlp_depth; ++i) {
      banks_.push_back(add_bank("_" + std::to_string(i + 1), dv, i == 0 ? dk : dv, true, rng));
    }
  }
  if (v == Variant::Rdn) {
    rk_ = &add("Rk", Shape{dk, dv}, rng);
    rv_ = &add("Rv", Shape{dv, dv}, rng);
    rq_ = &add("Rq", Shape{dk, dv}, rng);
    rb_ = &add("Rb", Shape{h, dv}, rng);
  }
}

template <typename T>
Parameter<T>& FwpLayer<T>::add(const std::string& name, Shape shape, Rng& rng) {
  Parameter<T>& p = params_.add_uniform(prefix_ + name, std::move(shape), rng);
  own_.push_back(&p);
  return p;
}

template <typename T>
typename FwpLayer<T>::Bank FwpLayer<T>::add_bank(const std::string& tag, std::size_t m_total,
                                                 std::size_t n_total, bool delta, Rng& rng) {
  Bank bank;
  bank.wk = &add("Wk" + tag, Shape{n_total, spec_.d_in}, rng);
  bank.wv = &add("Wv" + tag, Shape{m_total, spec_.d_in}, rng);
  if (delta) bank.wb = &add("Wb" + tag, Shape{spec_.heads, spec_.d_in}, rng);
  bank.m = m_total / spec_.heads;
  bank.n = n_total / spec_.heads;
  return bank;
}

template <typename T>
Parameter<T>& FwpLayer<T>::param(std::string_view short_name) {
  return params_.at(prefix_ + std::string(short_name));
}

template <typename T>
FastState<T> FwpLayer<T>::initial_state(std::size_t batch) const {
  if (batch == 0) throw UsageError("batch must be positive");
  FastState<T> state;
  state.batch = batch;
  const std::size_t groups = batch * spec_.heads;
  const Variant v = spec_.variant;
  if (v == Variant::Softmax) return state;
  if (v == Variant::DeltaDelta) {
    const std::size_t dh = spec_.d_in / spec_.heads;
    state.fast.push_back(zeros<T>(Shape{groups, 3 * dh + 1, dh}));
    state.fast.push_back(zeros<T>(Shape{groups, dh, dh}));
    return state;
  }
  for (const auto& bank : banks_) state.fast.push_back(zeros<T>(Shape{groups, bank.m, bank.n}));
  if (is_delta_rnn(v) || is_delta_lstm(v) || v == Variant::Rdn) {
    state.y_prev = zeros<T>(Shape{batch, spec_.d_out});
  }
  if (is_delta_lstm(v)) state.c_prev = zeros<T>(Shape{batch, spec_.d_out});
  return state;
}

template <typename T>
typename FwpLayer<T>::BankInputs FwpLayer<T>::bank_inputs(const Bank& bank, const Var<T>& x) const {
  BankInputs in;
  in.k = softmax(linear(x, use(*bank.wk)), bank.n);
  in.v = linear(x, use(*bank.wv));
  if (bank.wb) in.beta = sigmoid(linear(x, use(*bank.wb)));
  return in;
}

template <typename T>
Var<T> FwpLayer<T>::write(const Bank& bank, const Var<T>& w, const BankInputs& in, std::size_t t,
                          std::size_t batch) const {
  const Var<T> k = slice_step(in.k, t, batch);
  const Var<T> v = slice_step(in.v, t, batch);
  if (!bank.wb) return head_outer_add(w, v, k);
  return head_delta_update(w, k, v, slice_step(in.beta, t, batch));
}

template <typename T>
Var<T> FwpLayer<T>::forward(const Var<T>& x, FastState<T>& state) {
  if (!state.initialized()) throw UsageError("forward on an uninitialised fast state");
  if (x.shape().size() != 2 || x.shape()[1] != spec_.d_in) {
    throw DimensionError("layer input must be [T*B, " + std::to_string(spec_.d_in) + "], got " +
                         shape_string(x.shape()));
  }
  if (x.shape()[0] % state.batch != 0) {
    throw DimensionError("layer input rows are not a multiple of the batch size");
  }
  const std::size_t steps = x.shape()[0] / state.batch;
  switch (spec_.variant) {
    case Variant::Softmax:
      return forward_softmax(x, state, steps);
    case Variant::Rdn:
      return forward_rdn(x, state, steps);
    case Variant::DeltaDelta:
      return forward_delta_delta(x, state, steps);
    default:
      return forward_banked(x, state, steps);
  }
}

template <typename T>
Var<T> FwpLayer<T>::forward_softmax(const Var<T>& x, FastState<T>& state, std::size_t) {
  const Bank& bank = banks_[0];
  Var<T> q = linear(x, use(*wq_));
  Var<T> k = linear(x, use(*bank.wk));
  Var<T> v = linear(x, use(*bank.wv));
  std::size_t offset = 0;
  if (state.keys.defined()) {
    offset = state.keys.shape()[0] / state.batch;
    const std::array<Var<T>, 2> ks{state.keys, k};
    const std::array<Var<T>, 2> vs{state.values, v};
    k = concat_rows<T>(ks);
    v = concat_rows<T>(vs);
  }
  state.keys = k;
  state.values = v;
  return causal_attention(q, k, v, state.batch, spec_.heads, offset);
}

template <typename T>
Var<T> FwpLayer<T>::forward_banked(const Var<T>& x, FastState<T>& state, std::size_t steps) {
  const Variant variant = spec_.variant;
  const std::size_t batch = state.batch;
  const std::size_t dv_head = spec_.d_out / spec_.heads;
  const Var<T> q_all = softmax(linear(x, use(*wq_)), spec_.d_key / spec_.heads);
  std::vector<BankInputs> inputs;
  inputs.reserve(banks_.size());
  for (const auto& bank : banks_) inputs.push_back(bank_inputs(bank, x));
  Var<T> bias_f, bias_o;
  if (bias_f_) {
    bias_f = use(*bias_f_);
    bias_o = use(*bias_o_);
  }

  std::vector<Var<T>> ys;
  ys.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < banks_.size(); ++b) {
      state.fast[b] = write(banks_[b], state.fast[b], inputs[b], t, batch);
    }
    const Var<T> q = slice_step(q_all, t, batch);
    Var<T> y;
    if (variant == Variant::Linear || variant == Variant::Delta) {
      y = head_matvec(state.fast[0], q);
    } else if (is_delta_rnn(variant)) {
      const bool version_a = variant == Variant::DeltaRnnA;
      const Var<T> r = version_a ? state.y_prev : softmax(state.y_prev, dv_head);
      y = head_matvec(state.fast[0], q) + head_matvec(state.fast[1], r);
      if (version_a) y = softmax(y, dv_head);
    } else if (is_delta_lstm(variant)) {
      const Var<T> r =
          variant == Variant::DeltaLstmA ? state.y_prev : softmax(state.y_prev, dv_head);
      const Var<T> z_u = head_matvec(state.fast[0], q);
      const Var<T> pre_u = z_u + head_matvec(state.fast[3], r);
      const Var<T> f =
          sigmoid(add_row(head_matvec(state.fast[1], q) + head_matvec(state.fast[4], r), bias_f));
      const Var<T> o =
          sigmoid(add_row(head_matvec(state.fast[2], q) + head_matvec(state.fast[5], r), bias_o));
      const Var<T> u = variant == Variant::DeltaLstmD ? pre_u : sigmoid(pre_u);
      const Var<T> c = u + f * (state.c_prev - u);
      y = c * o;
      if (variant == Variant::DeltaLstmA) y = softmax(y, dv_head);
      if (variant == Variant::DeltaLstmC) y = y + z_u;
      state.c_prev = c;
    } else {  // DeltaMlp
      Var<T> h = head_matvec(state.fast[0], q);
      for (std::size_t i = 1; i < banks_.size(); ++i) {
        h = head_matvec(state.fast[i], softmax(h, dv_head));
      }
      y = h;
    }
    if (state.y_prev.defined()) state.y_prev = y;
    ys.push_back(y);
  }
  return ys.size() == 1 ? ys[0] : concat_rows<T>(ys);
}

template <typename T>
Var<T> FwpLayer<T>::forward_rdn(const Var<T>& x, FastState<T>& state, std::size_t steps) {
  const Bank& bank = banks_[0];
  const std::size_t batch = state.batch;
  const std::size_t dk_head = spec_.d_key / spec_.heads;
  const Var<T> k_all = linear(x, use(*bank.wk));
  const Var<T> v_all = linear(x, use(*bank.wv));
  const Var<T> q_all = linear(x, use(*wq_));
  const Var<T> b_all = linear(x, use(*bank.wb));
  const Var<T> rk = use(*rk_), rv = use(*rv_), rq = use(*rq_), rb = use(*rb_);

  std::vector<Var<T>> ys;
  ys.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Var<T> h = tanh(state.y_prev);
    const Var<T> k = softmax(slice_step(k_all, t, batch) + linear(h, rk), dk_head);
    const Var<T> v = slice_step(v_all, t, batch) + linear(h, rv);
    const Var<T> q = softmax(slice_step(q_all, t, batch) + linear(h, rq), dk_head);
    const Var<T> beta = sigmoid(slice_step(b_all, t, batch) + linear(h, rb));
    state.fast[0] = head_delta_update(state.fast[0], k, v, beta);
    const Var<T> y = head_matvec(state.fast[0], q);
    state.y_prev = y;
    ys.push_back(y);
  }
  return ys.size() == 1 ? ys[0] : concat_rows<T>(ys);
}

template <typename T>
Var<T> FwpLayer<T>::forward_delta_delta(const Var<T>& x, FastState<T>& state, std::size_t steps) {
  const std::size_t d = spec_.d_in, h = spec_.heads, dh = d / h;
  const std::size_t batch = state.batch;
  const Var<T> p = linear(x, use(*slow_));
  const Var<T> k_all = softmax(slice_cols(p, 0, d), dh);
  const Var<T> q_all = softmax(slice_cols(p, d, d), dh);
  const Var<T> v_all = slice_cols(p, 2 * d, h * (3 * dh + 1));
  const Var<T> b_all = sigmoid(slice_cols(p, 2 * d + h * (3 * dh + 1), h));

  std::vector<Var<T>> ys;
  ys.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    state.fast[0] = head_delta_update(state.fast[0], slice_step(k_all, t, batch),
                                      slice_step(v_all, t, batch), slice_step(b_all, t, batch));
    const Var<T> inner = head_matvec(state.fast[0], slice_step(q_all, t, batch));
    const Var<T> k_in = softmax(gather_cols(inner, dd_index_[0]), dh);
    const Var<T> v_in = gather_cols(inner, dd_index_[1]);
    const Var<T> q_in = softmax(gather_cols(inner, dd_index_[2]), dh);
    const Var<T> b_in = sigmoid(gather_cols(inner, dd_index_[3]));
    state.fast[1] = head_delta_update(state.fast[1], k_in, v_in, b_in);
    ys.push_back(head_matvec(state.fast[1], q_in));
  }
  return ys.size() == 1 ? ys[0] : concat_rows<T>(ys);
}

template <typename T>
Var<T> phi(const Var<T>& k) {
  return softmax(k);
}

template <typename T>
Var<T> sum_update(const Var<T>& w, const Var<T>& k, const Var<T>& v) {
  if (w.shape().size() != 2 || k.shape().size() != 1 || v.shape().size() != 1 ||
      w.shape()[0] != v.size() || w.shape()[1] != k.size()) {
    throw DimensionError("sum_update: W " + shape_string(w.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const Var<T> out = head_outer_add(reshape(w, Shape{1, w.shape()[0], w.shape()[1]}),
                                    reshape(v, Shape{1, v.size()}), reshape(k, Shape{1, k.size()}));
  return reshape(out, w.shape());
}

template <typename T>
std::pair<Var<T>, Var<T>> delta_update(const Var<T>& w, const Var<T>& k, const Var<T>& v, T beta) {
  if (w.shape().size() != 2 || k.shape().size() != 1 || v.shape().size() != 1 ||
      w.shape()[0] != v.size() || w.shape()[1] != k.size()) {
    throw DimensionError("delta_update: W " + shape_string(w.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const Var<T> w3 = reshape(w, Shape{1, w.shape()[0], w.shape()[1]});
  const Var<T> k2 = reshape(k, Shape{1, k.size()});
  const Var<T> v_bar = reshape(head_matvec(w3, k2), v.shape());
  const Var<T> b = Var<T>(Tensor<T>(Shape{1, 1}, {beta}));
  const Var<T> w_new = head_delta_update(w3, k2, reshape(v, Shape{1, v.size()}), b);
  return {reshape(w_new, w.shape()), v_bar};
}

template struct FastState<float>;
template struct FastState<double>;
template class FwpLayer<float>;
template class FwpLayer<double>;
template Var<float> phi(const Var<float>&);
template Var<double> phi(const Var<double>&);
template Var<float> sum_update(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> sum_update(const Var<double>&, const Var<double>&, const Var<double>&);
template std::pair<Var<float>, Var<float>> delta_update(const Var<float>&, const Var<float>&,
                                                        const Var<float>&, float);
template std::pair<Var<double>, Var<double>> delta_update(const Var<double>&, const Var<double>&,
                                                          const Var<double>&, double);

}  // namespace rfwp
