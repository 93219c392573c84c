// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "rfwp/checkpoint.hpp"

namespace rfwp {

namespace {

std::vector<int> bench_tokens(std::size_t T, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> out(T);
  for (int& t : out) t = static_cast<int>(rng.index(vocab));
  return out;
}

// Returns elapsed nanoseconds and leaves the final state in `state`.
double run_once(Model<float>& model, std::span<const int> tokens, std::size_t chunk, ModelState<float>& state) {
  NoGradScope<float> no_grad;
  state = model.initial_state(1);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t t0 = 0; t0 < tokens.size(); t0 += chunk) {
    const std::size_t n = std::min(chunk, tokens.size() - t0);
    model.forward(tokens.subspan(t0, n), state);
  }
  return std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - start).count();
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

ModelSpec bench_spec(Variant variant, const BenchOptions& options) {
  ModelSpec s;
  s.variant = variant;
  s.n_layers = options.n_layers;
  s.d_model = options.d_model;
  s.heads = options.heads;
  s.ffn_dim = options.ffn_dim;
  s.mlp_depth = 2;
  s.vocab_in = 39;
  s.vocab_out = 26;
  s.positional = variant == Variant::Softmax ? Positional::Sinusoidal : Positional::None;
  if (variant == Variant::DeltaDelta) s.heads = 1;
  s.validate();
  return s;
}

BenchPoint measure(Variant variant, std::size_t T, const BenchOptions& options) {
  Model<float> model(bench_spec(variant, options), options.seed);
  const auto tokens = bench_tokens(T, model.spec().vocab_in, options.seed);
  ModelState<float> state;
  run_once(model, tokens, options.chunk, state);  // warmup
  std::vector<double> times;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.reps); ++r) {
    times.push_back(run_once(model, tokens, options.chunk, state));
  }
  BenchPoint p;
  p.variant = variant;
  p.T = T;
  p.d_model = model.spec().d_model;
  p.heads = model.spec().heads;
  p.ns_per_token = median(times) / double(T);
  p.state_bytes = state.bytes();
  p.reps = times.size();
  return p;
}

std::vector<BenchPoint> scaling_sweep(std::span<const Variant> variants, std::span<const std::size_t> lengths,
                                      const BenchOptions& options) {
  std::vector<BenchPoint> out;
  for (Variant v : variants) {
    for (std::size_t T : lengths) out.push_back(measure(v, T, options));
  }
  return out;
}

std::string to_csv(std::span<const BenchPoint> points) {
  std::ostringstream out;
  out << kBenchCsvHeader << '\n';
  for (const auto& p : points) {
    char ns[32];
    std::snprintf(ns, sizeof(ns), "%.1f", p.ns_per_token);
    out << variant_name(p.variant) << ',' << p.T << ',' << p.d_model << ',' << p.heads << ',' << ns << ','
        << p.state_bytes << ',' << p.reps << '\n';
  }
  return out.str();
}

std::vector<Throughput> ordering_report(std::span<const Variant> variants, std::size_t T,
                                        const BenchOptions& options) {
  std::vector<Throughput> out;
  for (Variant v : variants) {
    const BenchPoint p = measure(v, T, options);
    out.push_back({v, 1e9 / p.ns_per_token, 0.0});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Throughput& a, const Throughput& b) { return a.tokens_per_second > b.tokens_per_second; });
  for (auto& t : out) t.relative = t.tokens_per_second / out.front().tokens_per_second;
  return out;
}

std::uint64_t logits_checksum(Model<float>& model, std::span<const int> tokens) {
  NoGradScope<float> no_grad;
  ModelState<float> state = model.initial_state(1);
  const Tensor<float> logits = model.forward(tokens, state).value();
  return fnv1a64(logits.data(), logits.bytes());
}

}  // namespace rfwp
