// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "rfwp/checkpoint.hpp"
#include "rfwp/model.hpp"
#include "testing.hpp"

using namespace rfwp;
using oracle::Mat;
using oracle::Vec;
using rfwp::testing::max_abs_diff;
using Td = Tensor<double>;

namespace {

ModelSpec toy_spec(Variant v, std::size_t layers = 2) {
  ModelSpec s;
  s.variant = v;
  s.n_layers = layers;
  s.d_model = 8;
  s.heads = 2;
  s.ffn_dim = 12;
  s.mlp_depth = 2;
  s.vocab_in = 7;
  s.vocab_out = 5;
  if (v == Variant::Softmax) s.positional = Positional::Sinusoidal;
  return s;
}

ModelSpec lstm_spec(std::size_t vocab_in, std::size_t vocab_out, std::size_t hidden = 256,
                    std::size_t embed = 128) {
  ModelSpec s;
  s.arch = Arch::Lstm;
  s.n_layers = 1;
  s.d_model = hidden;
  s.embed_dim = embed;
  s.vocab_in = vocab_in;
  s.vocab_out = vocab_out;
  return s;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> out(n);
  for (int& t : out) t = static_cast<int>(rng.index(vocab));
  return out;
}

Td logits_of(Model<double>& m, const std::vector<int>& tokens, std::size_t batch) {
  ModelState<double> state = m.initial_state(batch);
  return m.forward(tokens, state).value();
}

Vec layernorm_ref(const Vec& x, const Vec& g, const Vec& b) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v;
  mu /= double(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return out;
}

Vec add(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// Layer-by-layer composition for one sequence.
std::vector<Vec> compose(Model<double>& m, const std::vector<int>& tokens) {
  const ModelSpec& s = m.spec();
  const auto w = oracle::weights_of(m.params());
  std::vector<Vec> xs;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    Vec x = w.at("embed")[static_cast<std::size_t>(tokens[t])];
    if (s.positional == Positional::Sinusoidal) {
      for (std::size_t i = 0; i < s.d_model; i += 2) {
        const double angle = double(t) / std::pow(10000.0, double(i) / double(s.d_model));
        x[i] += std::sin(angle);
        x[i + 1] += std::cos(angle);
      }
    }
    xs.push_back(x);
  }
  for (std::size_t l = 0; l < s.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    std::vector<Vec> h;
    for (const auto& x : xs) h.push_back(layernorm_ref(x, w.vec(p + "ln1.gain"), w.vec(p + "ln1.bias")));
    const auto a = oracle::run_layer(s.layer_spec(), oracle::weights_of(m.params(), p + "fwp."), h);
    for (std::size_t t = 0; t < xs.size(); ++t) {
      xs[t] = add(xs[t], oracle::matvec(w.at(p + "W_o"), a[t]));
      Vec inner = oracle::matvec(w.at(p + "ffn.W_in"),
                                 layernorm_ref(xs[t], w.vec(p + "ln2.gain"), w.vec(p + "ln2.bias")));
      for (double& v : inner) v = std::max(v, 0.0);
      xs[t] = add(xs[t], oracle::matvec(w.at(p + "ffn.W_out"), inner));
    }
  }
  std::vector<Vec> logits;
  for (const auto& x : xs) {
    logits.push_back(add(oracle::matvec(w.at("head.W"), layernorm_ref(x, w.vec("ln_f.gain"), w.vec("ln_f.bias"))),
                         w.vec("head.b")));
  }
  return logits;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("rfwp_test_" + name);
}

}  // namespace

TEST_CASE("single token gives one row of logits") {
  for (Variant v : all_variants()) {
    Model<double> m(toy_spec(v), 1);
    const std::vector<int> tok{3};
    CHECK(logits_of(m, tok, 1).shape() == Shape{1, 5});
  }
  Model<double> lstm(lstm_spec(7, 5, 8, 4), 1);
  const std::vector<int> tok{3};
  CHECK(logits_of(lstm, tok, 1).shape() == Shape{1, 5});
}

TEST_CASE("out-of-vocabulary ids are rejected") {
  Model<double> m(toy_spec(Variant::Delta), 1);
  const std::vector<int> tok{7};
  CHECK_THROWS_AS(logits_of(m, tok, 1), std::out_of_range);
}

TEST_CASE("perturbing a later token leaves earlier logits bitwise unchanged") {
  Rng rng(2);
  std::vector<ModelSpec> specs;
  for (Variant v : all_variants()) specs.push_back(toy_spec(v));
  specs.push_back(lstm_spec(7, 5, 8, 4));
  for (const auto& spec : specs) {
    Model<double> m(spec, 2);
    const std::size_t T = 6, B = 2;
    std::vector<int> tokens = random_tokens(T * B, 7, rng);
    const Td base = logits_of(m, tokens, B);
    const std::size_t t = 3;
    tokens[(t + 1) * B] = (tokens[(t + 1) * B] + 1) % 7;
    const Td changed = logits_of(m, tokens, B);
    bool prefix_same = true;
    for (std::size_t i = 0; i < (t + 1) * B * 5; ++i) prefix_same = prefix_same && base[i] == changed[i];
    bool later_differs = false;
    for (std::size_t i = (t + 1) * B * 5; i < base.size(); ++i) later_differs = later_differs || base[i] != changed[i];
    INFO(variant_name(spec.variant) << (spec.arch == Arch::Lstm ? " (lstm)" : ""));
    CHECK(prefix_same);
    CHECK(later_differs);
  }
}

TEST_CASE("stack forward matches a hand-composed model") {
  Rng rng(3);
  for (Variant v : {Variant::Delta, Variant::DeltaRnnB, Variant::Softmax, Variant::DeltaLstmD}) {
    Model<double> m(toy_spec(v), 3);
    for (auto& p : m.params()) {  // move LN parameters off their defaults
      if (p->name().find("ln") != std::string::npos || p->name() == "head.b") {
        for (double& x : p->value().storage()) x += rng.uniform(-0.3, 0.3);
      }
    }
    const std::size_t T = 5, B = 2;
    const auto tokens = random_tokens(T * B, 7, rng);
    const Td y = logits_of(m, tokens, B);
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<int> seq;
      for (std::size_t t = 0; t < T; ++t) seq.push_back(tokens[t * B + b]);
      INFO(variant_name(v));
      CHECK(max_abs_diff(testing::sequence_of(y, B, b), compose(m, seq)) < 1e-10);
    }
  }
}

TEST_CASE("closed-form parameter counts") {
  Rng rng(4);
  for (Variant v : all_variants()) {
    for (int trial = 0; trial < 3; ++trial) {
      ModelSpec s = toy_spec(v, 1 + rng.index(3));
      s.heads = 1 + rng.index(2);
      s.d_model = s.heads * (2 + rng.index(3));
      s.ffn_dim = 1 + rng.index(20);
      s.mlp_depth = 1 + rng.index(3);
      s.vocab_in = 2 + rng.index(30);
      s.vocab_out = 2 + rng.index(30);
      Model<float> m(s, 1);
      CHECK(param_count(s) == m.params().count());
    }
  }
  const ModelSpec lstm = lstm_spec(39, 26);
  CHECK(param_count(lstm) == Model<float>(lstm, 1).params().count());
  CHECK(std::abs(double(param_count(lstm)) - 405000.0) / 405000.0 < 0.02);

  ModelSpec s = toy_spec(Variant::Delta, 3);
  const std::size_t before = param_count(s);
  s.ffn_dim *= 2;
  CHECK(param_count(s) - before == 3 * 2 * s.d_model * (s.ffn_dim / 2));

  ModelSpec dd = toy_spec(Variant::DeltaDelta, 2);
  dd.heads = 1;
  ModelSpec delta = dd;
  delta.variant = Variant::Delta;
  const std::size_t d = dd.d_model;
  CHECK(param_count(dd) - param_count(delta) == 2 * (d * (5 * d + 2) - d * (3 * d + 1)));
}

TEST_CASE("four-layer 256-wide delta net has about 3.2M parameters") {
  ModelSpec s;
  s.variant = Variant::Delta;
  s.n_layers = 4;
  s.d_model = 256;
  s.heads = 16;
  s.ffn_dim = 1024;
  s.vocab_in = 39;
  s.vocab_out = 26;
  CHECK(std::abs(double(param_count(s)) - 3.2e6) / 3.2e6 < 0.02);
}

TEST_CASE("LSTM baseline") {
  SUBCASE("zero weights give uniform logits") {
    Model<double> m(lstm_spec(6, 4, 5, 3), 5);
    for (auto& p : m.params()) p->value().fill(0.0);
    const std::vector<int> tokens{1, 2, 3};
    const Td y = logits_of(m, tokens, 1);
    for (double v : y.storage()) CHECK(v == 0.0);
  }
  SUBCASE("matches textbook re-execution") {
    Model<double> m(lstm_spec(6, 4, 5, 3), 6);
    const std::vector<int> tokens{1, 5, 0};
    const Td y = logits_of(m, tokens, 1);
    const auto w = oracle::weights_of(m.params());
    oracle::LstmWeights lw{w.at("lstm.W_ih"), w.at("lstm.W_hh"), w.vec("lstm.bias")};
    std::vector<Vec> xs;
    for (int t : tokens) xs.push_back(w.at("embed")[static_cast<std::size_t>(t)]);
    Vec h(5, 0.0), c(5, 0.0);
    std::vector<Vec> expect;
    for (const auto& hv : oracle::run_lstm(lw, xs, h, c)) {
      expect.push_back(add(oracle::matvec(w.at("head.W"), hv), w.vec("head.b")));
    }
    CHECK(max_abs_diff(testing::sequence_of(y, 1, 0), expect) < 1e-10);
  }
  SUBCASE("forced gates give an integrator or a feedforward map") {
    Model<double> m(lstm_spec(6, 4, 3, 3), 7);
    Td& bias = m.params().at("lstm.bias").value();
    // input gate shut, forget gate open: the cell never changes from zero
    for (std::size_t i = 0; i < 3; ++i) {
      bias[i] = -1000.0;
      bias[3 + i] = 1000.0;
    }
    ModelState<double> state = m.initial_state(1);
    const std::vector<int> tokens{1, 2, 3, 4};
    m.forward(tokens, state);
    for (double v : state.lstm_c.value().storage()) CHECK(v == 0.0);
    // input open, forget shut: the cell equals the candidate of the last input
    for (std::size_t i = 0; i < 3; ++i) {
      bias[i] = 1000.0;
      bias[3 + i] = -1000.0;
    }
    ModelState<double> s2 = m.initial_state(1);
    m.forward(tokens, s2);
    const auto w = oracle::weights_of(m.params());
    const Vec x = w.at("embed")[4];
    const Vec hprev = [&] {
      ModelState<double> s3 = m.initial_state(1);
      const std::vector<int> head(tokens.begin(), tokens.end() - 1);
      m.forward(head, s3);
      return testing::row_of(s3.lstm_h.value(), 0);
    }();
    const Vec a = add(add(oracle::matvec(w.at("lstm.W_ih"), x), oracle::matvec(w.at("lstm.W_hh"), hprev)),
                      w.vec("lstm.bias"));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s2.lstm_c.value()[i] - std::tanh(a[6 + i])) < 1e-12);
  }
}

TEST_CASE("eval forward is deterministic and dropout is seeded") {
  ModelSpec s = toy_spec(Variant::DeltaRnnB);
  s.dropout = 0.3;
  Model<double> m(s, 8);
  Rng rng(8);
  const auto tokens = random_tokens(12, 7, rng);
  CHECK(logits_of(m, tokens, 2) == logits_of(m, tokens, 2));
  auto train_logits = [&](std::uint64_t seed) {
    ModelState<double> state = m.initial_state(2);
    return m.forward(tokens, state, ForwardOptions{true, seed}).value();
  };
  CHECK(train_logits(1) == train_logits(1));
  CHECK(train_logits(1) != train_logits(2));
  CHECK(train_logits(1) != logits_of(m, tokens, 2));
}

TEST_CASE("model gradients match finite differences") {
  Rng rng(9);
  for (const ModelSpec& s : {toy_spec(Variant::Delta), toy_spec(Variant::Softmax), lstm_spec(7, 5, 4, 3)}) {
    Model<double> m(s, 9);
    const auto tokens = random_tokens(8, 7, rng);
    const std::vector<int> targets{0, 1, -1, 3, 4, 2, 1, 0};
    auto loss = [&] {
      ModelState<double> state = m.initial_state(2);
      return cross_entropy(m.forward(tokens, state), targets, 7.0);
    };
    const auto r = testing::check_parameter_gradients(m.params(), loss);
    INFO(r.worst_name << " " << r.worst_relative);
    CHECK(r.ok);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  Model<float> m(toy_spec(Variant::DeltaLstmB), 10);
  const auto path = temp_file("ckpt.bin").string();
  save_checkpoint(path, m);
  const auto info = read_checkpoint_info(path);
  CHECK(info.spec == m.spec());
  CHECK(info.scalar_bytes == 4);
  CHECK(info.scalar_count == param_count(m.spec()));
  auto loaded = load_checkpoint<float>(path);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(loaded->params()[i].value() == m.params()[i].value());
  }
  auto widened = load_checkpoint<double>(path);
  CHECK(widened->params()[0].value()[0] == double(m.params()[0].value()[0]));

  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write_variant = [&](const std::vector<char>& b) {
    const auto bad = temp_file("bad.bin").string();
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    return bad;
  };
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(read_checkpoint_info(write_variant(magic)), FormatError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(load_checkpoint<float>(write_variant(flipped)), FormatError);
  auto truncated = std::vector<char>(bytes.begin(), bytes.begin() + 40);
  CHECK_THROWS_AS(read_checkpoint_info(write_variant(truncated)), FormatError);
  CHECK_THROWS_AS(read_checkpoint_info(temp_file("missing.bin").string()), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("model spec validation") {
  ModelSpec s = toy_spec(Variant::Delta);
  s.positional = Positional::Sinusoidal;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = toy_spec(Variant::Delta);
  s.heads = 3;
  CHECK_THROWS_AS(s.validate(), DimensionError);
  CHECK(ModelSpec::from_json(toy_spec(Variant::Rdn).to_json()) == toy_spec(Variant::Rdn));
}
