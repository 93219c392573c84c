// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop: Adam with linear warmup, global-norm clipping, truncated
// BPTT over fixed-length segments with optional state carryover, and
// sharded forward/backward across worker threads.

#pragma once

#include <functional>
#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "rfwp/model.hpp"
#include "rfwp/tasks.hpp"

namespace rfwp {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t warmup_steps = 0;
  std::optional<double> clip_norm;
  std::size_t batch_size = 64;
  std::size_t bptt_span = 256;
  bool carryover = true;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;  // epochs between validation passes
  std::size_t threads = 0;     // 0: hardware concurrency (capped by FWL_THREADS)
  // Stop once validation print-token accuracy reaches this percentage.
  std::optional<double> target_accuracy;
  // Wall-clock limit in seconds, checked after each epoch; 0 disables it.
  double max_seconds = 0.0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

// Linear warmup from 0 to lr over warmup_steps, constant afterwards. Steps
// count optimizer updates from 1.
double learning_rate(const TrainConfig& config, std::size_t step);

template <typename T>
class Adam {
 public:
  Adam(const AdamConfig& config, const ParameterSet<T>& params);
  // One bias-corrected update from the gradients held in `params`.
  void step(ParameterSet<T>& params, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Scales every gradient so the global L2 norm is at most max_norm. Returns
// the applied factor in (0, 1].
template <typename T>
double clip_gradients(ParameterSet<T>& params, double max_norm);

template <typename T>
double gradient_norm(const ParameterSet<T>& params);

struct RunRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  double wall_time = 0.0;          // seconds since training began
  double tokens_per_second = 0.0;  // over the segments since the last record

  nlohmann::ordered_json to_json() const;
};

// A batch laid out time-major with padding at the end of shorter episodes
// (input id 0, target -1).
struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> input;
  std::vector<int> target;

  // Tokens and targets of time steps [t0, t1).
  std::span<const int> input_slice(std::size_t t0, std::size_t t1) const;
  std::span<const int> target_slice(std::size_t t0, std::size_t t1) const;
};

Batch make_batch(std::span<const Episode> episodes, std::span<const std::size_t> order);

// Worker count after applying the FWL_THREADS cap.
std::size_t resolve_threads(std::size_t requested);

struct EvalOptions {
  std::size_t batch_size = 64;
  std::size_t bptt_span = 256;
  bool carryover = true;  // otherwise state resets at every segment
};

// Greedy per-position predictions in eval mode.
template <typename T>
std::vector<std::vector<int>> predict(Model<T>& model, std::span<const Episode> episodes,
                                      const EvalOptions& options);

// Throws UsageError if the model vocabulary does not match the task.
template <typename T>
Metrics evaluate(Model<T>& model, std::span<const Episode> episodes, TaskKind kind,
                 const EvalOptions& options);

struct TrainResult {
  std::vector<RunRecord> records;
  Metrics best_valid;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  bool reached_target = false;
  bool hit_time_limit = false;
  double wall_time = 0.0;
};

using RecordSink = std::function<void(const RunRecord&)>;

// Throws NumericError on a non-finite loss after emitting a diagnostic record.
template <typename T>
TrainResult train(Model<T>& model, std::span<const Episode> train_set, std::span<const Episode> valid_set,
                  TaskKind kind, const TrainConfig& config, const RecordSink& sink = {});

}  // namespace rfwp
