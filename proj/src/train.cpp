// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "rfwp/ops.hpp"

namespace rfwp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename F>
void run_parallel(std::size_t n, std::size_t workers, F&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(n);
  for (std::size_t i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <typename T>
void check_vocab(const Model<T>& model, TaskKind kind) {
  const Vocab& vocab = vocab_for(kind);
  if (model.spec().vocab_in != vocab.input.size() || model.spec().vocab_out != vocab.output.size()) {
    throw UsageError("model vocabulary (" + std::to_string(model.spec().vocab_in) + " in, " +
                     std::to_string(model.spec().vocab_out) + " out) does not match task " + task_name(kind));
  }
}

nlohmann::ordered_json metrics_json(const Metrics& m) {
  return {{"sequence_accuracy", m.sequence_accuracy}, {"print_token_accuracy", m.print_token_accuracy}};
}

// Contiguous split of `n` items into at most `parts` non-empty ranges.
std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t n, std::size_t parts) {
  parts = std::max<std::size_t>(1, std::min(parts, n));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t p = 0; p < parts; ++p) out.emplace_back(n * p / parts, n * (p + 1) / parts);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(adam.lr >= 0.0)) throw UsageError("learning rate must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw UsageError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw UsageError("Adam epsilon must be positive");
  if (clip_norm && !(*clip_norm > 0.0)) throw UsageError("clip_norm must be positive");
  if (batch_size == 0) throw UsageError("batch_size must be positive");
  if (bptt_span == 0) throw UsageError("bptt_span must be positive");
  if (eval_every == 0) throw UsageError("eval_every must be positive");
  if (target_accuracy && (*target_accuracy < 0.0 || *target_accuracy > 100.0)) {
    throw UsageError("target_accuracy must be a percentage");
  }
  if (!(max_seconds >= 0.0)) throw UsageError("max_seconds must be non-negative");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["lr"] = adam.lr;
  j["beta1"] = adam.beta1;
  j["beta2"] = adam.beta2;
  j["eps"] = adam.eps;
  j["warmup_steps"] = warmup_steps;
  j["clip_norm"] = clip_norm ? nlohmann::ordered_json(*clip_norm) : nlohmann::ordered_json();
  j["batch_size"] = batch_size;
  j["bptt_span"] = bptt_span;
  j["carryover"] = carryover;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["threads"] = threads;
  j["target_accuracy"] = target_accuracy ? nlohmann::ordered_json(*target_accuracy) : nlohmann::ordered_json();
  j["max_seconds"] = max_seconds;
  return j;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
  if (config.warmup_steps == 0 || step >= config.warmup_steps) return config.adam.lr;
  return config.adam.lr * double(step) / double(config.warmup_steps);
}

template <typename T>
Adam<T>::Adam(const AdamConfig& config, const ParameterSet<T>& params) : config_(config) {
  for (const auto& p : params) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params, double lr) {
  if (params.size() != m_.size()) throw UsageError("Adam: parameter set changed since construction");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i].value().data();
    const T* g = params[i].grad().data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double gj = double(g[j]);
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(double(w[j]) - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

template <typename T>
double gradient_norm(const ParameterSet<T>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p->grad().storage()) sq += double(g) * double(g);
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_gradients(ParameterSet<T>& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto& p : params) {
    for (T& g : p->grad().storage()) g = static_cast<T>(double(g) * scale);
  }
  return scale;
}

nlohmann::ordered_json RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["metrics"] = metrics;
  j["wall_time"] = wall_time;
  j["tokens_per_second"] = tokens_per_second;
  return j;
}

std::span<const int> Batch::input_slice(std::size_t t0, std::size_t t1) const {
  return std::span<const int>(input).subspan(t0 * batch, (t1 - t0) * batch);
}

std::span<const int> Batch::target_slice(std::size_t t0, std::size_t t1) const {
  return std::span<const int>(target).subspan(t0 * batch, (t1 - t0) * batch);
}

Batch make_batch(std::span<const Episode> episodes, std::span<const std::size_t> order) {
  Batch b;
  b.batch = order.size();
  for (std::size_t i : order) b.length = std::max(b.length, episodes[i].input.size());
  b.input.assign(b.length * b.batch, 0);
  b.target.assign(b.length * b.batch, -1);
  for (std::size_t j = 0; j < order.size(); ++j) {
    const Episode& e = episodes[order[j]];
    for (std::size_t t = 0; t < e.input.size(); ++t) {
      b.input[t * b.batch + j] = e.input[t];
      b.target[t * b.batch + j] = e.target[t];
    }
  }
  return b;
}

std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("FWL_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(cap, &end, 10);
    if (end != cap && *end == '\0' && v > 0) n = std::min<std::size_t>(n, v);
  }
  return n;
}

template <typename T>
std::vector<std::vector<int>> predict(Model<T>& model, std::span<const Episode> episodes,
                                      const EvalOptions& options) {
  NoGradScope<T> no_grad;
  std::vector<std::vector<int>> out(episodes.size());
  std::vector<std::size_t> order(episodes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t start = 0; start < episodes.size(); start += options.batch_size) {
    const std::size_t end = std::min(episodes.size(), start + options.batch_size);
    const Batch batch = make_batch(episodes, std::span<const std::size_t>(order).subspan(start, end - start));
    for (std::size_t j = 0; j < batch.batch; ++j) out[start + j].resize(episodes[start + j].input.size());
    ModelState<T> state = model.initial_state(batch.batch);
    for (std::size_t t0 = 0; t0 < batch.length; t0 += options.bptt_span) {
      const std::size_t t1 = std::min(batch.length, t0 + options.bptt_span);
      if (!options.carryover) state = model.initial_state(batch.batch);
      const Tensor<T> logits = model.forward(batch.input_slice(t0, t1), state).value();
      const std::size_t classes = logits.cols();
      for (std::size_t t = t0; t < t1; ++t) {
        for (std::size_t j = 0; j < batch.batch; ++j) {
          if (t >= out[start + j].size()) continue;
          const T* row = logits.data() + ((t - t0) * batch.batch + j) * classes;
          out[start + j][t] = static_cast<int>(argmax(std::span<const T>(row, classes)));
        }
      }
    }
  }
  return out;
}

template <typename T>
Metrics evaluate(Model<T>& model, std::span<const Episode> episodes, TaskKind kind, const EvalOptions& options) {
  check_vocab(model, kind);
  const auto predictions = predict(model, episodes, options);
  return eval_metrics(predictions, episodes, kind);
}

template <typename T>
TrainResult train(Model<T>& model, std::span<const Episode> train_set, std::span<const Episode> valid_set,
                  TaskKind kind, const TrainConfig& config, const RecordSink& sink) {
  config.validate();
  check_vocab(model, kind);
  if (train_set.empty()) throw UsageError("training set is empty");

  const auto start_time = Clock::now();
  const std::size_t workers = resolve_threads(config.threads);
  ParameterSet<T>& params = model.params();
  Adam<T> adam(config.adam, params);
  const EvalOptions eval_options{config.batch_size, config.bptt_span, config.carryover};

  TrainResult result;
  std::size_t step = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t tokens_since = 0;
  double busy_since = 0.0;

  auto emit = [&](RunRecord rec) {
    rec.wall_time = seconds_since(start_time);
    result.records.push_back(rec);
    if (sink) sink(rec);
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng shuffle(hash_combine(config.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - first);
      const auto shards = shard_ranges(count, workers);
      std::vector<Batch> shard_batches;
      std::vector<ModelState<T>> states;
      for (const auto& [a, b] : shards) {
        shard_batches.push_back(make_batch(train_set, std::span<const std::size_t>(order).subspan(first + a, b - a)));
        states.push_back(model.initial_state(b - a));
      }
      std::size_t batch_length = 0;
      for (const auto& sb : shard_batches) batch_length = std::max(batch_length, sb.length);

      for (std::size_t t0 = 0; t0 < batch_length; t0 += config.bptt_span) {
        const auto seg_start = Clock::now();
        const std::size_t t1 = std::min(batch_length, t0 + config.bptt_span);
        std::size_t scored = 0, tokens = 0;
        for (const auto& sb : shard_batches) {
          const std::size_t e = std::min(t1, sb.length);
          if (t0 >= e) continue;
          for (int tgt : sb.target_slice(t0, e)) scored += tgt >= 0;
          tokens += (e - t0) * sb.batch;
        }
        if (scored == 0) continue;
        ++step;
        params.zero_grad();
        std::vector<std::unique_ptr<Tape<T>>> tapes(shards.size());
        std::vector<double> shard_loss(shards.size(), 0.0);
        run_parallel(shards.size(), workers, [&](std::size_t s) {
          const Batch& sb = shard_batches[s];
          const std::size_t e = std::min(t1, sb.length);
          if (!config.carryover) states[s] = model.initial_state(sb.batch);
          if (t0 >= e) return;
          tapes[s] = std::make_unique<Tape<T>>();
          TapeScope<T> scope(*tapes[s]);
          const ForwardOptions opts{true, hash_combine(hash_combine(config.seed, step), s)};
          const Var<T> logits = model.forward(sb.input_slice(t0, e), states[s], opts);
          const Var<T> loss = cross_entropy(logits, sb.target_slice(t0, e), static_cast<T>(scored));
          shard_loss[s] = double(loss.value()[0]);
          tapes[s]->backward(loss);
          states[s] = states[s].detached();
        });
        for (auto& tape : tapes) {
          if (tape) tape->flush_parameter_grads();
        }
        tapes.clear();
        const double loss = std::accumulate(shard_loss.begin(), shard_loss.end(), 0.0);
        const double lr = learning_rate(config, step);
        if (!std::isfinite(loss)) {
          RunRecord diag;
          diag.step = step;
          diag.loss = loss;
          diag.lr = lr;
          diag.metrics = {{"epoch", epoch}, {"error", "non-finite loss"}};
          emit(diag);
          throw NumericError("non-finite training loss at step " + std::to_string(step));
        }
        if (config.clip_norm) clip_gradients(params, *config.clip_norm);
        adam.step(params, lr);
        loss_sum += loss;
        ++loss_count;
        tokens_since += tokens;
        busy_since += seconds_since(seg_start);
      }
    }

    result.epochs_run = epoch;
    result.hit_time_limit = config.max_seconds > 0.0 && seconds_since(start_time) >= config.max_seconds;
    if (epoch % config.eval_every == 0 || epoch == config.epochs || result.hit_time_limit) {
      RunRecord rec;
      rec.step = step;
      rec.loss = loss_count ? loss_sum / double(loss_count) : 0.0;
      rec.lr = learning_rate(config, step);
      rec.tokens_per_second = busy_since > 0.0 ? double(tokens_since) / busy_since : 0.0;
      rec.metrics["epoch"] = epoch;
      if (!valid_set.empty()) {
        const Metrics m = evaluate(model, valid_set, kind, eval_options);
        rec.metrics["valid"] = metrics_json(m);
        if (result.best_epoch == 0 || m.print_token_accuracy > result.best_valid.print_token_accuracy) {
          result.best_valid = m;
          result.best_epoch = epoch;
        }
        if (config.target_accuracy && m.print_token_accuracy >= *config.target_accuracy) result.reached_target = true;
      }
      emit(rec);
      loss_sum = 0.0;
      loss_count = 0;
      tokens_since = 0;
      busy_since = 0.0;
      if (result.reached_target) break;
    }
    if (result.hit_time_limit) break;
  }
  result.steps = step;
  result.wall_time = seconds_since(start_time);
  return result;
}

#define RFWP_INSTANTIATE_TRAIN(T)                                                                        \
  template class Adam<T>;                                                                               \
  template double clip_gradients<T>(ParameterSet<T>&, double);                                          \
  template double gradient_norm<T>(const ParameterSet<T>&);                                             \
  template std::vector<std::vector<int>> predict<T>(Model<T>&, std::span<const Episode>, const EvalOptions&); \
  template Metrics evaluate<T>(Model<T>&, std::span<const Episode>, TaskKind, const EvalOptions&);      \
  template TrainResult train<T>(Model<T>&, std::span<const Episode>, std::span<const Episode>, TaskKind,  \
                                const TrainConfig&, const RecordSink&);

RFWP_INSTANTIATE_TRAIN(float)
RFWP_INSTANTIATE_TRAIN(double)

}  // namespace rfwp
