// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "rfwp/fwp.hpp"
#include "testing.hpp"

using namespace rfwp;
using rfwp::testing::max_abs_diff;
using rfwp::testing::random_tensor;
using rfwp::testing::sequence_of;
using V = Var<double>;
using Td = Tensor<double>;

namespace {

LayerSpec spec_for(Variant v, std::size_t d = 8, std::size_t heads = 2, std::size_t depth = 2) {
  LayerSpec s;
  s.variant = v;
  s.d_in = s.d_key = s.d_out = d;
  s.heads = heads;
  s.mlp_depth = depth;
  return s;
}

struct Fixture {
  ParameterSet<double> params;
  std::unique_ptr<FwpLayer<double>> layer;
  Fixture(const LayerSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    layer = std::make_unique<FwpLayer<double>>(spec, params, "", rng);
  }
  Td run(const Td& x, std::size_t batch) {
    FastState<double> state = layer->initial_state(batch);
    return layer->forward(V(x), state).value();
  }
};

// Largest deviation between the layer and the reference over every sequence.
double oracle_gap(Fixture& f, const Td& x, std::size_t batch) {
  const Td y = f.run(x, batch);
  const auto w = oracle::weights_of(f.params);
  double worst = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto expect = oracle::run_layer(f.layer->spec(), w, sequence_of(x, batch, b));
    worst = std::max(worst, max_abs_diff(sequence_of(y, batch, b), expect));
  }
  return worst;
}

void copy_shared(ParameterSet<double>& from, ParameterSet<double>& to) {
  for (auto& p : to) {
    if (Parameter<double>* src = from.find(p->name())) p->value() = src->value();
  }
}

std::vector<Variant> recurrent_variants() {
  std::vector<Variant> out;
  for (Variant v : all_variants()) {
    if (is_recurrent(v)) out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("phi maps onto the simplex") {
  const Td u = phi(V(Td(Shape{4}))).value();
  for (double v : u.storage()) CHECK(v == doctest::Approx(0.25));
  Rng rng(1);
  const Td p = phi(V(random_tensor<double>(Shape{6}, rng, -5, 5))).value();
  double total = 0.0;
  for (double v : p.storage()) total += v;
  CHECK(std::abs(total - 1.0) < 1e-12);
  const Td hot = phi(V(Td::vector({50, 0, 0}))).value();
  const double z = std::exp(50.0) + 2.0;
  CHECK(std::abs(hot[0] - std::exp(50.0) / z) < 1e-12);
  CHECK(std::abs(hot[1] - 1.0 / z) < 1e-30);
}

TEST_CASE("sum update examples") {
  const Td w = sum_update(V(Td(Shape{2, 2})), V(Td::vector({1, 0})), V(Td::vector({1, 2}))).value();
  CHECK(w == Td::matrix({{1, 0}, {2, 0}}));
  Rng rng(2);
  const Td w0 = random_tensor<double>(Shape{3, 4}, rng);
  CHECK(sum_update(V(w0), V(random_tensor<double>(Shape{4}, rng)), V(Td(Shape{3}))).value() == w0);
  CHECK_THROWS_AS(sum_update(V(w0), V(Td(Shape{3})), V(Td(Shape{3}))), DimensionError);
}

TEST_CASE("delta update examples") {
  Rng rng(3);
  const Td w0 = random_tensor<double>(Shape{5, 4}, rng);
  const Td v = random_tensor<double>(Shape{5}, rng);
  Td k = random_tensor<double>(Shape{4}, rng);
  CHECK(delta_update(V(w0), V(k), V(v), 0.0).first.value() == w0);

  double norm = 0.0;
  for (double e : k.storage()) norm += e * e;
  for (double& e : k.storage()) e /= std::sqrt(norm);
  const auto [w1, v_bar] = delta_update(V(w0), V(k), V(v), 1.0);
  const Td read = linear(V(k), w1).value();
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(read[i] - v[i]) < 1e-12);
    double expect = 0.0;
    for (std::size_t j = 0; j < 4; ++j) expect += w0.at(i, j) * k[j];
    CHECK(std::abs(v_bar.value()[i] - expect) < 1e-14);
  }

  // 20 random steps against a step-by-step re-execution.
  V w(Td(Shape{3, 3}));
  oracle::Mat ref = oracle::zeros(3, 3);
  for (int t = 0; t < 20; ++t) {
    const Td kt = phi(V(random_tensor<double>(Shape{3}, rng, -2, 2))).value();
    const Td vt = random_tensor<double>(Shape{3}, rng);
    const double beta = rng.uniform(0.0, 1.0);
    w = delta_update(w, V(kt), V(vt), beta).first;
    const auto bar = oracle::matvec(ref, {kt[0], kt[1], kt[2]});
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) ref[i][j] += beta * (vt[i] - bar[i]) * kt[j];
    }
  }
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) worst = std::max(worst, std::abs(w.value().at(i, j) - ref[i][j]));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("every variant matches step-by-step re-execution") {
  Rng rng(4);
  for (Variant v : all_variants()) {
    for (std::size_t depth : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
      if (v != Variant::DeltaMlp && depth > 1) continue;
      Fixture f(spec_for(v, 8, 2, depth), 100 + static_cast<int>(v));
      const Td x = random_tensor<double>(Shape{7 * 3, 8}, rng, -2, 2);
      INFO(variant_name(v) << " depth " << depth);
      CHECK(oracle_gap(f, x, 3) < 1e-10);
    }
  }
}

TEST_CASE("linear transformer equals the attention form") {
  Rng rng(5);
  for (std::size_t T : {8, 64}) {
    for (std::size_t d : {8, 32}) {
      for (std::size_t H : {1, 4}) {
        Fixture f(spec_for(Variant::Linear, d, H), T * 100 + d + H);
        const Td x = random_tensor<double>(Shape{T * 2, d}, rng, -2, 2);
        const Td y = f.run(x, 2);
        const auto w = oracle::weights_of(f.params);
        for (std::size_t b = 0; b < 2; ++b) {
          const auto expect = oracle::linear_attention_form(f.layer->spec(), w, sequence_of(x, 2, b));
          CHECK(max_abs_diff(sequence_of(y, 2, b), expect) < 1e-10);
        }
      }
    }
  }
}

TEST_CASE("first linear transformer step is one attention term") {
  Fixture f(spec_for(Variant::Linear, 6, 1), 6);
  Rng rng(6);
  const Td x = random_tensor<double>(Shape{1, 6}, rng);
  const Td y = f.run(x, 1);
  const auto w = oracle::weights_of(f.params);
  const auto xv = testing::row_of(x, 0);
  const auto q = oracle::softmax(oracle::matvec(w.at("Wq"), xv));
  const auto k = oracle::softmax(oracle::matvec(w.at("Wk"), xv));
  const auto v = oracle::matvec(w.at("Wv"), xv);
  double score = 0.0;
  for (std::size_t i = 0; i < 6; ++i) score += q[i] * k[i];
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(y[i] - score * v[i]) < 1e-14);
}

TEST_CASE("multi-head layers equal independent narrow heads") {
  Rng rng(7);
  for (Variant v : {Variant::Linear, Variant::Delta}) {
    for (std::size_t H : {2, 4}) {
      const std::size_t d = 8, w = d / H;
      Fixture wide(spec_for(v, d, H), 70 + H);
      const Td x = random_tensor<double>(Shape{6, d}, rng, -2, 2);
      const Td y = wide.run(x, 1);
      for (std::size_t h = 0; h < H; ++h) {
        LayerSpec narrow_spec = spec_for(v, d, 1);
        narrow_spec.d_key = narrow_spec.d_out = w;
        Fixture narrow(narrow_spec, 1);
        for (auto& p : narrow.params) {
          const Td& src = wide.params.at(p->name()).value();
          const std::size_t rows = p->name() == "Wb" ? 1 : w;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) p->value().at(r, c) = src.at(h * rows + r, c);
          }
        }
        const Td yh = narrow.run(x, 1);
        double worst = 0.0;
        for (std::size_t t = 0; t < 6; ++t) {
          for (std::size_t i = 0; i < w; ++i) worst = std::max(worst, std::abs(yh.at(t, i) - y.at(t, h * w + i)));
        }
        CHECK(worst < 1e-12);
      }
    }
  }
}

TEST_CASE("permuting heads permutes output blocks") {
  const std::size_t d = 8, H = 4, w = 2;
  const std::size_t perm[H] = {2, 0, 3, 1};
  Fixture a(spec_for(Variant::Delta, d, H), 8), b(spec_for(Variant::Delta, d, H), 9);
  for (auto& p : b.params) {
    const Td& src = a.params.at(p->name()).value();
    const std::size_t rows = p->name() == "Wb" ? 1 : w;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) p->value().at(h * rows + r, c) = src.at(perm[h] * rows + r, c);
      }
    }
  }
  Rng rng(10);
  const Td x = random_tensor<double>(Shape{5, d}, rng);
  const Td ya = a.run(x, 1), yb = b.run(x, 1);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < w; ++i) CHECK(yb.at(t, h * w + i) == ya.at(t, perm[h] * w + i));
    }
  }
}

TEST_CASE("reduction chain onto the delta net") {
  Rng rng(11);
  Fixture delta(spec_for(Variant::Delta), 11);
  const Td x = random_tensor<double>(Shape{10 * 2, 8}, rng, -2, 2);
  const Td reference = delta.run(x, 2);

  Fixture rdn(spec_for(Variant::Rdn), 12);
  copy_shared(delta.params, rdn.params);
  for (const char* r : {"Rk", "Rv", "Rq", "Rb"}) rdn.params.at(r).value().fill(0.0);
  CHECK(max_abs_diff(rdn.run(x, 2), reference) < 1e-12);

  Fixture rnn(spec_for(Variant::DeltaRnnB), 13);
  copy_shared(delta.params, rnn.params);
  rnn.params.at("Wv_r").value().fill(0.0);
  CHECK(max_abs_diff(rnn.run(x, 2), reference) < 1e-12);

  LayerSpec mlp_spec = spec_for(Variant::DeltaMlp, 8, 2, 1);
  Fixture mlp(mlp_spec, 14);
  for (const char* name : {"Wq", "Wk", "Wv", "Wb"}) {
    mlp.params.at(std::string(name) + (std::string(name) == "Wq" ? "" : "_1")).value() =
        delta.params.at(name).value();
  }
  CHECK(max_abs_diff(mlp.run(x, 2), reference) < 1e-12);
}

TEST_CASE("delta RNN first step reads R with a uniform query") {
  Fixture f(spec_for(Variant::DeltaRnnB, 4, 1), 15);
  Rng rng(15);
  const Td x = random_tensor<double>(Shape{1, 4}, rng);
  const Td y = f.run(x, 1);
  const auto w = oracle::weights_of(f.params);
  const auto xv = testing::row_of(x, 0);
  auto written = [&](const std::string& tag) {
    const auto k = oracle::softmax(oracle::matvec(w.at("Wk" + tag), xv));
    const auto v = oracle::matvec(w.at("Wv" + tag), xv);
    const double beta = oracle::sigmoid(oracle::matvec(w.at("Wb" + tag), xv)[0]);
    oracle::Mat m = oracle::zeros(4, 4);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) m[i][j] = beta * v[i] * k[j];
    }
    return m;
  };
  const auto yw = oracle::matvec(written(""), oracle::softmax(oracle::matvec(w.at("Wq"), xv)));
  const auto yr = oracle::matvec(written("_r"), {0.25, 0.25, 0.25, 0.25});
  for (int i = 0; i < 4; ++i) CHECK(std::abs(y[i] - yw[i] - yr[i]) < 1e-14);
}

TEST_CASE("delta LSTM gate saturation") {
  Rng rng(16);
  const Td x = random_tensor<double>(Shape{6, 8}, rng, -2, 2);
  Fixture closed(spec_for(Variant::DeltaLstmD), 16);
  closed.params.at("b_f").value().fill(1000.0);
  const Td shut = closed.run(x, 1);
  for (double v : shut.storage()) CHECK(v == 0.0);

  Fixture delta(spec_for(Variant::Delta), 17);
  const Td reference = delta.run(x, 1);
  Fixture open(spec_for(Variant::DeltaLstmD), 18);
  open.params.at("Wq").value() = delta.params.at("Wq").value();
  for (const char* name : {"Wk", "Wv", "Wb"}) {
    open.params.at(std::string(name) + "_u").value() = delta.params.at(name).value();
  }
  for (const char* name : {"Wv_ru", "Wv_rf", "Wv_ro"}) open.params.at(name).value().fill(0.0);
  open.params.at("b_f").value().fill(-1000.0);
  open.params.at("b_o").value().fill(1000.0);
  CHECK(max_abs_diff(open.run(x, 1), reference) < 1e-12);
}

TEST_CASE("zero fast memories read zero") {
  Rng rng(19);
  const Td x = random_tensor<double>(Shape{5, 8}, rng);
  Fixture mlp(spec_for(Variant::DeltaMlp, 8, 2, 3), 19);
  for (auto& p : mlp.params) {
    if (p->name().rfind("Wv", 0) == 0) p->value().fill(0.0);
  }
  const Td y_mlp = mlp.run(x, 1);
  for (double v : y_mlp.storage()) CHECK(v == 0.0);
  Fixture dd(spec_for(Variant::DeltaDelta, 8, 2), 20);
  dd.params.at("S").value().fill(0.0);
  const Td y_dd = dd.run(x, 1);
  for (double v : y_dd.storage()) CHECK(v == 0.0);
}

TEST_CASE("delta delta dimensions") {
  const auto dims = DeltaDeltaDims::of(4);
  CHECK(dims.slow_matrix == std::pair<std::size_t, std::size_t>{4, 22});
  CHECK(dims.fast_outer == std::pair<std::size_t, std::size_t>{4, 13});
  CHECK(dims.fast_inner == std::pair<std::size_t, std::size_t>{4, 4});
  for (std::size_t d : {4, 8, 16}) {
    Fixture f(spec_for(Variant::DeltaDelta, d, 1), d);
    const auto dd = DeltaDeltaDims::of(d);
    CHECK(f.params.count() == dd.slow_matrix.first * dd.slow_matrix.second);
    CHECK(slow_param_count(f.layer->spec()) == f.params.count());
    const auto state = f.layer->initial_state(1);
    CHECK(state.fast[0].shape() == Shape{1, dd.fast_outer.second, dd.fast_outer.first});
    CHECK(state.fast[1].shape() == Shape{1, d, d});
  }
  CHECK_THROWS_AS(Fixture(LayerSpec{Variant::DeltaDelta, 8, 8, 4, 1, 1, 0, 0.0}, 1), DimensionError);
}

TEST_CASE("closed-form parameter counts equal enumeration") {
  Rng rng(21);
  for (Variant v : all_variants()) {
    for (int trial = 0; trial < 3; ++trial) {
      LayerSpec s;
      s.variant = v;
      s.heads = 1 + rng.index(3);
      s.d_in = s.heads * (1 + rng.index(4));
      s.d_key = v == Variant::DeltaDelta ? s.d_in : s.heads * (1 + rng.index(4));
      s.d_out = (v == Variant::DeltaDelta || v == Variant::Softmax) ? s.d_key : s.heads * (1 + rng.index(4));
      if (v == Variant::DeltaDelta) s.d_out = s.d_in;
      s.mlp_depth = 1 + rng.index(3);
      ParameterSet<double> params;
      FwpLayer<double> layer(s, params, "l.", rng);
      CHECK(slow_param_count(s) == params.count());
    }
  }
}

TEST_CASE("fast state size does not depend on time") {
  Rng rng(22);
  for (Variant v : recurrent_variants()) {
    Fixture f(spec_for(v), 22);
    FastState<double> state = f.layer->initial_state(1);
    std::vector<std::size_t> sizes;
    for (std::size_t t = 1; t <= 1000; ++t) {
      f.layer->step(V(random_tensor<double>(Shape{1, 8}, rng)), state);
      if (t == 1 || t == 100 || t == 1000) sizes.push_back(state.bytes());
    }
    INFO(variant_name(v));
    CHECK(sizes[0] == sizes[1]);
    CHECK(sizes[1] == sizes[2]);
  }
}

TEST_CASE("segment carryover equals one pass") {
  Rng rng(23);
  for (Variant v : all_variants()) {
    Fixture f(spec_for(v), 23);
    const std::size_t L = 6, B = 2;
    const Td x = random_tensor<double>(Shape{2 * L * B, 8}, rng, -2, 2);
    const Td whole = f.run(x, B);
    FastState<double> state = f.layer->initial_state(B);
    const Td first = f.layer->forward(slice_rows(V(x), 0, L * B), state).value();
    state = state.detached();
    const Td second = f.layer->forward(slice_rows(V(x), L * B, L * B), state).value();
    double worst = 0.0;
    for (std::size_t i = 0; i < first.size(); ++i) {
      worst = std::max(worst, std::abs(first[i] - whole[i]));
      worst = std::max(worst, std::abs(second[i] - whole[first.size() + i]));
    }
    INFO(variant_name(v));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("slow weight gradients match finite differences for every variant") {
  Rng rng(24);
  for (Variant v : all_variants()) {
    for (std::size_t depth : {std::size_t{1}, std::size_t{2}}) {
      if (v != Variant::DeltaMlp && depth > 1) continue;
      Fixture f(spec_for(v, 8, 2, depth), 24);
      const Td x = random_tensor<double>(Shape{5 * 2, 8}, rng, -2, 2);
      const Td proj = testing::projection_weights(Shape{10, 8}, 25);
      auto loss = [&] {
        FastState<double> state = f.layer->initial_state(2);
        return weighted_sum(f.layer->forward(V(x), state), proj);
      };
      const auto result = testing::check_parameter_gradients(f.params, loss);
      INFO(variant_name(v) << " depth " << depth << " worst " << result.worst_name << " "
                           << result.worst_relative);
      CHECK(result.ok);
    }
  }
}

TEST_CASE("softmax attention baseline examples") {
  Fixture f(spec_for(Variant::Softmax, 4, 2), 26);
  Rng rng(26);
  const Td x1 = random_tensor<double>(Shape{1, 4}, rng);
  const Td v1 = linear(V(x1), V(f.params.at("Wv").value())).value();
  CHECK(max_abs_diff(f.run(x1, 1), v1) < 1e-15);

  f.params.at("Wq").value().fill(0.0);
  const Td x = random_tensor<double>(Shape{6, 4}, rng);
  const Td y = f.run(x, 1);
  const Td vals = linear(V(x), V(f.params.at("Wv").value())).value();
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t i = 0; i < 4; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j <= t; ++j) mean += vals.at(j, i);
      CHECK(std::abs(y.at(t, i) - mean / double(t + 1)) < 1e-12);
    }
  }
}

TEST_CASE("layer errors") {
  LayerSpec bad = spec_for(Variant::Delta, 8, 3);
  ParameterSet<double> params;
  Rng rng(1);
  CHECK_THROWS_AS(FwpLayer<double>(bad, params, "", rng), DimensionError);
  Fixture f(spec_for(Variant::Delta), 1);
  FastState<double> empty;
  CHECK_THROWS_AS(f.layer->forward(V(Td(Shape{2, 8})), empty), UsageError);
  FastState<double> state = f.layer->initial_state(2);
  CHECK_THROWS_AS(f.layer->forward(V(Td(Shape{3, 8})), state), DimensionError);
  CHECK_THROWS_AS(f.layer->forward(V(Td(Shape{2, 7})), state), DimensionError);
  CHECK_THROWS_AS(parse_variant("gru"), UsageError);
  for (Variant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
}
