// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Timing harness for per-token cost and state size as a function of
// sequence length, and relative throughput across variants.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rfwp/model.hpp"

namespace rfwp {

struct BenchOptions {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t chunk = 256;  // tokens per forward call; state carries across calls
  std::size_t reps = 5;     // timed repetitions after one discarded warmup
  std::uint64_t seed = 1;
};

struct BenchPoint {
  Variant variant = Variant::Delta;
  std::size_t T = 0;
  std::size_t d_model = 0;
  std::size_t heads = 0;
  double ns_per_token = 0.0;  // median over repetitions
  std::size_t state_bytes = 0;
  std::size_t reps = 0;
};

ModelSpec bench_spec(Variant variant, const BenchOptions& options);

// Measures one variant at one length on the calling thread.
BenchPoint measure(Variant variant, std::size_t T, const BenchOptions& options);

std::vector<BenchPoint> scaling_sweep(std::span<const Variant> variants, std::span<const std::size_t> lengths,
                                      const BenchOptions& options);

inline constexpr const char* kBenchCsvHeader = "variant,T,d_model,H,ns_per_token,state_bytes,reps";
std::string to_csv(std::span<const BenchPoint> points);

struct Throughput {
  Variant variant = Variant::Delta;
  double tokens_per_second = 0.0;
  double relative = 0.0;  // to the fastest variant
};

// Variants sorted fastest first, measured at length T.
std::vector<Throughput> ordering_report(std::span<const Variant> variants, std::size_t T,
                                        const BenchOptions& options);

// FNV-1a over the logits of a fixed token stream; used to confirm that
// benchmarking leaves model outputs untouched.
std::uint64_t logits_checksum(Model<float>& model, std::span<const int> tokens);

}  // namespace rfwp
