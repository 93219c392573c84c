// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Algorithmic sequence tasks: code execution and sequential ListOps.
// Episodes are word-level token streams with one target per input position;
// the target is the no-output token "N" except where an answer is due.

#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfwp/rng.hpp"

namespace rfwp {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed program or expression handed to an interpreter.
class InterpretError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { CodeExec, ListOps };

std::string task_name(TaskKind kind);
TaskKind parse_task(const std::string& name);  // UsageError on unknown names

inline constexpr int kCodeMin = -8;
inline constexpr int kCodeMax = 16;
inline constexpr int kNoOutput = 0;  // output id of "N" in every task
inline constexpr std::size_t kMaxVariables = 5;

struct CodeExecSpec {
  std::size_t n_statements = 100;
  std::size_t n_variables = 3;
  bool allow_greater = false;        // conditionals use `<` only unless set
  std::size_t rejection_budget = 1000;  // per statement

  void validate() const;
};

struct ListOpsSpec {
  std::size_t depth = 10;
  std::size_t max_args = 5;

  void validate() const;
};

struct TaskSpec {
  TaskKind kind = TaskKind::CodeExec;
  CodeExecSpec code;
  ListOpsSpec listops;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
};

struct Vocab {
  std::vector<std::string> input;
  std::vector<std::string> output;

  int input_id(const std::string& token) const;   // InterpretError if unknown
  int output_id(const std::string& token) const;
  nlohmann::ordered_json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  bool operator==(const Vocab&) const = default;
};

const Vocab& vocab_for(TaskKind kind);

struct Episode {
  std::vector<int> input;
  std::vector<int> target;
  // Positions whose target is an answer slot: the `;` closing every print
  // statement (code execution) or the final token (ListOps).
  std::vector<std::size_t> answer_positions;
  std::string text;
  nlohmann::ordered_json meta;

  nlohmann::ordered_json to_json() const;
  static Episode from_json(const nlohmann::ordered_json& j);
};

// Code execution. Statements: `v = lit ;`, `v ++ ;`, `v -- ;`, `print v ;`
// and `if v < lit : <basic> ;`. The last statement is always a plain print.
Episode gen_code_exec(const CodeExecSpec& spec, Rng& rng);
// Word tokens -> output tokens ("N" or a value), one per input token.
std::vector<std::string> interpret_code(std::span<const std::string> tokens);

// Sequential ListOps over MAX, MIN, FIRST with single-digit arguments.
Episode gen_listops(const ListOpsSpec& spec, Rng& rng);
int evaluate_listops(std::span<const std::string> tokens);
std::size_t listops_depth(std::span<const std::string> tokens);
// Splits on whitespace and detaches closing brackets ("1]" -> "1", "]").
std::vector<std::string> tokenize(const std::string& text);

Episode generate(const TaskSpec& spec, std::uint64_t seed);

// Re-derives the targets of an episode from its input tokens.
std::vector<int> reference_targets(TaskKind kind, std::span<const int> input);

struct Metrics {
  double sequence_accuracy = 0.0;      // percent
  double print_token_accuracy = 0.0;   // percent over answer positions
  std::size_t sequences = 0;
  std::size_t answer_tokens = 0;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const float> scores);
std::size_t argmax(std::span<const double> scores);

// A code-execution sequence counts as correct only if every position
// matches; a ListOps sequence is scored on its final answer.
Metrics eval_metrics(std::span<const std::vector<int>> predictions,
                     std::span<const Episode> episodes, TaskKind kind);

struct SplitCounts {
  std::size_t train = 10000;
  std::size_t valid = 1000;
  std::size_t test = 1000;
};

inline const char* const kSplitNames[3] = {"train", "valid", "test"};

// Episode i of split s uses seed hash(hash(seed, s), i).
std::uint64_t episode_seed(std::uint64_t seed, std::size_t split, std::size_t index);
std::vector<Episode> generate_split(const TaskSpec& spec, std::uint64_t seed, std::size_t split,
                                    std::size_t count);

// Writes train/valid/test .jsonl plus vocab.json into `dir`.
void dataset_export(const TaskSpec& spec, std::uint64_t seed, const SplitCounts& counts,
                    const std::string& dir);
void write_jsonl(const std::string& path, std::span<const Episode> episodes);
std::vector<Episode> read_jsonl(const std::string& path);

}  // namespace rfwp
