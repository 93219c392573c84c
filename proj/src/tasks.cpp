// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/tasks.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "rfwp/tensor.hpp"

namespace rfwp {

namespace {

const char* const kVarNames[kMaxVariables] = {"x", "y", "z", "w", "u"};

Vocab make_code_vocab() {
  Vocab v;
  v.input = {"=", "++", "--", ";", "if", "<", ">", ":", "print"};
  for (const char* name : kVarNames) v.input.emplace_back(name);
  for (int x = kCodeMin; x <= kCodeMax; ++x) v.input.push_back(std::to_string(x));
  v.output = {"N"};
  for (int x = kCodeMin; x <= kCodeMax; ++x) v.output.push_back(std::to_string(x));
  return v;
}

Vocab make_listops_vocab() {
  Vocab v;
  v.input = {"[MAX", "[MIN", "[FIRST", "]"};
  v.output = {"N"};
  for (int d = 0; d <= 9; ++d) {
    v.input.push_back(std::to_string(d));
    v.output.push_back(std::to_string(d));
  }
  return v;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

int lookup(const std::vector<std::string>& table, const std::string& token, const char* what) {
  const auto it = std::find(table.begin(), table.end(), token);
  if (it == table.end()) throw InterpretError(std::string("unknown ") + what + " token '" + token + "'");
  return static_cast<int>(it - table.begin());
}

bool in_code_range(int v) { return v >= kCodeMin && v <= kCodeMax; }

// ---- code execution generator ------------------------------------------

enum class Basic { Assign, Increment, Print };

struct Statement {
  std::vector<std::string> tokens;
  std::optional<int> printed;  // value shown at the closing `;`
  bool is_print = false;
};

class CodeGenerator {
 public:
  CodeGenerator(const CodeExecSpec& spec, Rng& rng) : spec_(spec), rng_(rng), values_(spec.n_variables) {}

  Episode run() {
    const Vocab& vocab = vocab_for(TaskKind::CodeExec);
    std::vector<std::string> tokens, targets;
    std::vector<std::size_t> answers;
    std::size_t rejections = 0;
    for (std::size_t s = 0; s < spec_.n_statements; ++s) {
      std::optional<Statement> st;
      const bool last = s + 1 == spec_.n_statements;
      for (std::size_t attempt = 0; !st; ++attempt) {
        if (attempt == spec_.rejection_budget) {
          throw GenerationError("rejection budget exhausted at statement " + std::to_string(s));
        }
        st = last ? propose_basic(Basic::Print, true) : propose();
        if (!st) ++rejections;
      }
      for (std::size_t i = 0; i < st->tokens.size(); ++i) {
        tokens.push_back(st->tokens[i]);
        targets.push_back("N");
      }
      if (st->is_print) answers.push_back(tokens.size() - 1);
      if (st->printed) targets.back() = std::to_string(*st->printed);
    }
    Episode ep;
    for (const auto& t : tokens) ep.input.push_back(vocab.input_id(t));
    for (const auto& t : targets) ep.target.push_back(vocab.output_id(t));
    ep.answer_positions = std::move(answers);
    ep.text = join(tokens);
    ep.meta = {{"task", "code_exec"},
               {"statements", spec_.n_statements},
               {"variables", spec_.n_variables},
               {"length", tokens.size()},
               {"rejections", rejections}};
    return ep;
  }

 private:
  std::optional<std::size_t> defined_variable() {
    std::vector<std::size_t> defined;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (values_[i]) defined.push_back(i);
    }
    if (defined.empty()) return std::nullopt;
    return defined[rng_.index(defined.size())];
  }

  int literal() { return static_cast<int>(rng_.uniform_int(kCodeMin, kCodeMax)); }

  std::optional<Statement> propose() {
    const std::size_t kind = rng_.index(4);
    if (kind < 3) return propose_basic(static_cast<Basic>(kind), true);
    const auto var = defined_variable();
    if (!var) return std::nullopt;
    const bool greater = spec_.allow_greater && rng_.bernoulli(0.5);
    const int threshold = literal();
    const bool holds = greater ? *values_[*var] > threshold : *values_[*var] < threshold;
    auto body = propose_basic(static_cast<Basic>(rng_.index(3)), holds);
    if (!body) return std::nullopt;
    Statement st;
    st.tokens = {"if", kVarNames[*var], greater ? ">" : "<", std::to_string(threshold), ":"};
    st.tokens.insert(st.tokens.end(), body->tokens.begin(), body->tokens.end());
    st.printed = body->printed;
    st.is_print = body->is_print;
    return st;
  }

  // Builds a basic statement and applies it when `execute` is set. Returns
  // nullopt when it cannot be formed or would leave the value range.
  std::optional<Statement> propose_basic(Basic kind, bool execute) {
    Statement st;
    if (kind == Basic::Assign) {
      const std::size_t var = rng_.index(spec_.n_variables);
      const int value = literal();
      st.tokens = {kVarNames[var], "=", std::to_string(value), ";"};
      if (execute) values_[var] = value;
      return st;
    }
    const auto var = defined_variable();
    if (!var) return std::nullopt;
    if (kind == Basic::Increment) {
      const int step = rng_.bernoulli(0.5) ? 1 : -1;
      const int next = *values_[*var] + step;
      if (execute && !in_code_range(next)) return std::nullopt;
      st.tokens = {kVarNames[*var], step > 0 ? "++" : "--", ";"};
      if (execute) values_[*var] = next;
      return st;
    }
    st.tokens = {"print", kVarNames[*var], ";"};
    st.is_print = true;
    if (execute) st.printed = *values_[*var];
    return st;
  }

  const CodeExecSpec& spec_;
  Rng& rng_;
  std::vector<std::optional<int>> values_;
};

// ---- code execution interpreter ----------------------------------------

class Interpreter {
 public:
  explicit Interpreter(std::span<const std::string> tokens) : tokens_(tokens), out_(tokens.size(), "N") {}

  std::vector<std::string> run() {
    while (pos_ < tokens_.size()) {
      if (tokens_[pos_] == "if") {
        ++pos_;
        const int lhs = read_variable();
        const std::string cmp = next();
        const int rhs = parse_int(next());
        expect(":");
        if (cmp != "<" && cmp != ">") throw InterpretError("unknown comparison '" + cmp + "'");
        basic(cmp == "<" ? lhs < rhs : lhs > rhs);
      } else {
        basic(true);
      }
    }
    return out_;
  }

 private:
  const std::string& next() {
    if (pos_ >= tokens_.size()) throw InterpretError("program ends mid-statement");
    return tokens_[pos_++];
  }
  void expect(const char* token) {
    if (next() != token) throw InterpretError(std::string("expected '") + token + "'");
  }
  static std::size_t variable_index(const std::string& name) {
    for (std::size_t i = 0; i < kMaxVariables; ++i) {
      if (name == kVarNames[i]) return i;
    }
    throw InterpretError("not a variable: '" + name + "'");
  }
  int read_variable() {
    const std::string& name = next();
    const auto it = env_.find(variable_index(name));
    if (it == env_.end()) throw InterpretError("read of undefined variable " + name);
    return it->second;
  }
  static int parse_int(const std::string& token) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(token, &used);
      if (used == token.size()) return v;
    } catch (const std::logic_error&) {
    }
    throw InterpretError("expected an integer, got '" + token + "'");
  }

  void basic(bool execute) {
    if (pos_ < tokens_.size() && tokens_[pos_] == "print") {
      ++pos_;
      const int value = read_variable();
      expect(";");
      if (execute) out_[pos_ - 1] = std::to_string(value);
      return;
    }
    const std::size_t var = variable_index(next());
    const std::string op = next();
    if (op == "=") {
      const int value = parse_int(next());
      if (execute) env_[var] = value;
    } else if (op == "++" || op == "--") {
      const auto it = env_.find(var);
      if (it == env_.end()) throw InterpretError("increment of undefined variable");
      if (execute) it->second += op == "++" ? 1 : -1;
    } else {
      throw InterpretError("unknown statement operator '" + op + "'");
    }
    expect(";");
  }

  std::span<const std::string> tokens_;
  std::vector<std::string> out_;
  std::map<std::size_t, int> env_;
  std::size_t pos_ = 0;
};

// ---- ListOps ------------------------------------------------------------

const char* const kListOps[3] = {"[MAX", "[MIN", "[FIRST"};

void build_list(const ListOpsSpec& spec, std::size_t level, Rng& rng, std::vector<std::string>& out) {
  out.emplace_back(kListOps[rng.index(3)]);
  const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(spec.max_args)));
  const std::size_t nested = level < spec.depth ? rng.index(n) : n;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == nested) {
      build_list(spec, level + 1, rng, out);
    } else {
      out.push_back(std::to_string(rng.index(10)));
    }
  }
  out.emplace_back("]");
}

int eval_list(std::span<const std::string> tokens, std::size_t& pos) {
  if (pos >= tokens.size()) throw InterpretError("expression ends early");
  const std::string& op = tokens[pos++];
  if (op != "[MAX" && op != "[MIN" && op != "[FIRST") throw InterpretError("expected an operator, got '" + op + "'");
  std::vector<int> args;
  while (true) {
    if (pos >= tokens.size()) throw InterpretError("unclosed list");
    const std::string& t = tokens[pos];
    if (t == "]") {
      ++pos;
      break;
    }
    if (!t.empty() && t.front() == '[') {
      args.push_back(eval_list(tokens, pos));
    } else if (t.size() == 1 && t[0] >= '0' && t[0] <= '9') {
      args.push_back(t[0] - '0');
      ++pos;
    } else {
      throw InterpretError("unexpected token '" + t + "'");
    }
  }
  if (args.empty()) throw InterpretError("empty list");
  if (op == "[MAX") return *std::max_element(args.begin(), args.end());
  if (op == "[MIN") return *std::min_element(args.begin(), args.end());
  return args.front();
}

std::vector<std::string> input_strings(TaskKind kind, std::span<const int> input) {
  const Vocab& vocab = vocab_for(kind);
  std::vector<std::string> out;
  out.reserve(input.size());
  for (int id : input) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.input.size()) {
      throw InterpretError("input id " + std::to_string(id) + " outside the vocabulary");
    }
    out.push_back(vocab.input[static_cast<std::size_t>(id)]);
  }
  return out;
}

template <typename S>
std::size_t argmax_impl(std::span<const S> scores) {
  if (scores.empty()) throw DimensionError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

}  // namespace

std::string task_name(TaskKind kind) { return kind == TaskKind::CodeExec ? "code_exec" : "listops"; }

TaskKind parse_task(const std::string& name) {
  if (name == "code_exec") return TaskKind::CodeExec;
  if (name == "listops") return TaskKind::ListOps;
  throw UsageError("unknown task '" + name + "' (expected code_exec or listops)");
}

void CodeExecSpec::validate() const {
  if (n_statements < 2) throw UsageError("code_exec needs at least 2 statements");
  if (n_variables < 1 || n_variables > kMaxVariables) {
    throw UsageError("code_exec variables must be in [1, " + std::to_string(kMaxVariables) + "]");
  }
  if (rejection_budget == 0) throw UsageError("rejection budget must be positive");
}

void ListOpsSpec::validate() const {
  if (depth < 1) throw UsageError("listops depth must be at least 1");
  if (max_args < 2) throw UsageError("listops max_args must be at least 2");
}

void TaskSpec::validate() const {
  if (kind == TaskKind::CodeExec) {
    code.validate();
  } else {
    listops.validate();
  }
}

nlohmann::ordered_json TaskSpec::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task_name(kind);
  if (kind == TaskKind::CodeExec) {
    j["statements"] = code.n_statements;
    j["variables"] = code.n_variables;
    j["allow_greater"] = code.allow_greater;
    j["rejection_budget"] = code.rejection_budget;
  } else {
    j["depth"] = listops.depth;
    j["max_args"] = listops.max_args;
  }
  return j;
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.kind = parse_task(j.at("task").get<std::string>());
  if (s.kind == TaskKind::CodeExec) {
    s.code.n_statements = j.at("statements").get<std::size_t>();
    s.code.n_variables = j.at("variables").get<std::size_t>();
    s.code.allow_greater = j.value("allow_greater", false);
    s.code.rejection_budget = j.value("rejection_budget", std::size_t{1000});
  } else {
    s.listops.depth = j.at("depth").get<std::size_t>();
    s.listops.max_args = j.value("max_args", std::size_t{5});
  }
  s.validate();
  return s;
}

int Vocab::input_id(const std::string& token) const { return lookup(input, token, "input"); }
int Vocab::output_id(const std::string& token) const { return lookup(output, token, "output"); }

nlohmann::ordered_json Vocab::to_json() const {
  nlohmann::ordered_json j;
  j["input"] = input;
  j["output"] = output;
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  v.input = j.at("input").get<std::vector<std::string>>();
  v.output = j.at("output").get<std::vector<std::string>>();
  return v;
}

const Vocab& vocab_for(TaskKind kind) {
  static const Vocab code = make_code_vocab();
  static const Vocab listops = make_listops_vocab();
  return kind == TaskKind::CodeExec ? code : listops;
}

nlohmann::ordered_json Episode::to_json() const {
  nlohmann::ordered_json j;
  j["input"] = input;
  j["target"] = target;
  j["text"] = text;
  nlohmann::ordered_json m = meta;
  m["answer_positions"] = answer_positions;
  j["meta"] = std::move(m);
  return j;
}

Episode Episode::from_json(const nlohmann::ordered_json& j) {
  Episode e;
  e.input = j.at("input").get<std::vector<int>>();
  e.target = j.at("target").get<std::vector<int>>();
  e.text = j.value("text", std::string());
  for (const auto& [key, value] : j.at("meta").items()) {
    if (key == "answer_positions") {
      e.answer_positions = value.get<std::vector<std::size_t>>();
    } else {
      e.meta[key] = value;
    }
  }
  if (e.input.size() != e.target.size()) throw DimensionError("episode input and target lengths differ");
  for (std::size_t p : e.answer_positions) {
    if (p >= e.input.size()) throw DimensionError("answer position past the end of the episode");
  }
  return e;
}

Episode gen_code_exec(const CodeExecSpec& spec, Rng& rng) {
  spec.validate();
  return CodeGenerator(spec, rng).run();
}

std::vector<std::string> interpret_code(std::span<const std::string> tokens) {
  return Interpreter(tokens).run();
}

Episode gen_listops(const ListOpsSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::string> tokens;
  build_list(spec, 1, rng, tokens);
  const Vocab& vocab = vocab_for(TaskKind::ListOps);
  Episode ep;
  for (const auto& t : tokens) ep.input.push_back(vocab.input_id(t));
  ep.target.assign(tokens.size(), kNoOutput);
  ep.target.back() = vocab.output_id(std::to_string(evaluate_listops(tokens)));
  ep.answer_positions = {tokens.size() - 1};
  ep.text = join(tokens);
  ep.meta = {{"task", "listops"}, {"depth", spec.depth}, {"length", tokens.size()}};
  return ep;
}

int evaluate_listops(std::span<const std::string> tokens) {
  std::size_t pos = 0;
  const int v = eval_list(tokens, pos);
  if (pos != tokens.size()) throw InterpretError("trailing tokens after expression");
  return v;
}

std::size_t listops_depth(std::span<const std::string> tokens) {
  std::size_t depth = 0, best = 0;
  for (const auto& t : tokens) {
    if (!t.empty() && t.front() == '[') {
      best = std::max(best, ++depth);
    } else if (t == "]") {
      if (depth == 0) throw InterpretError("unbalanced ']'");
      --depth;
    }
  }
  return best;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::size_t closers = 0;
    while (word.size() > 1 && word.back() == ']') {
      word.pop_back();
      ++closers;
    }
    out.push_back(word);
    out.insert(out.end(), closers, "]");
  }
  return out;
}

Episode generate(const TaskSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return spec.kind == TaskKind::CodeExec ? gen_code_exec(spec.code, rng) : gen_listops(spec.listops, rng);
}

std::vector<int> reference_targets(TaskKind kind, std::span<const int> input) {
  const Vocab& vocab = vocab_for(kind);
  const auto tokens = input_strings(kind, input);
  std::vector<int> out;
  if (kind == TaskKind::CodeExec) {
    for (const auto& t : interpret_code(tokens)) out.push_back(vocab.output_id(t));
  } else {
    out.assign(tokens.size(), kNoOutput);
    if (!out.empty()) out.back() = vocab.output_id(std::to_string(evaluate_listops(tokens)));
  }
  return out;
}

std::size_t argmax(std::span<const float> scores) { return argmax_impl(scores); }
std::size_t argmax(std::span<const double> scores) { return argmax_impl(scores); }

Metrics eval_metrics(std::span<const std::vector<int>> predictions, std::span<const Episode> episodes,
                     TaskKind kind) {
  if (predictions.size() != episodes.size()) throw DimensionError("one prediction per episode is required");
  Metrics m;
  std::size_t correct_seq = 0, correct_tok = 0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Episode& e = episodes[i];
    const auto& p = predictions[i];
    if (p.size() != e.target.size()) throw DimensionError("prediction length differs from episode length");
    for (std::size_t pos : e.answer_positions) correct_tok += p[pos] == e.target[pos];
    m.answer_tokens += e.answer_positions.size();
    if (kind == TaskKind::CodeExec) {
      correct_seq += p == e.target;
    } else {
      correct_seq += !p.empty() && p.back() == e.target.back();
    }
  }
  m.sequences = episodes.size();
  if (m.sequences > 0) m.sequence_accuracy = 100.0 * double(correct_seq) / double(m.sequences);
  if (m.answer_tokens > 0) m.print_token_accuracy = 100.0 * double(correct_tok) / double(m.answer_tokens);
  return m;
}

std::uint64_t episode_seed(std::uint64_t seed, std::size_t split, std::size_t index) {
  return hash_combine(hash_combine(seed, split), index);
}

std::vector<Episode> generate_split(const TaskSpec& spec, std::uint64_t seed, std::size_t split,
                                    std::size_t count) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(spec, episode_seed(seed, split, i)));
  return out;
}

void write_jsonl(const std::string& path, std::span<const Episode> episodes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& e : episodes) out << e.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<Episode> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Episode::from_json(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void dataset_export(const TaskSpec& spec, std::uint64_t seed, const SplitCounts& counts, const std::string& dir) {
  spec.validate();
  std::filesystem::create_directories(dir);
  const std::size_t sizes[3] = {counts.train, counts.valid, counts.test};
  for (std::size_t s = 0; s < 3; ++s) {
    const auto episodes = generate_split(spec, seed, s, sizes[s]);
    write_jsonl((std::filesystem::path(dir) / (std::string(kSplitNames[s]) + ".jsonl")).string(), episodes);
  }
  nlohmann::ordered_json header;
  header["task"] = spec.to_json();
  header["seed"] = seed;
  header["counts"] = {{"train", counts.train}, {"valid", counts.valid}, {"test", counts.test}};
  header["vocab"] = vocab_for(spec.kind).to_json();
  std::ofstream out(std::filesystem::path(dir) / "vocab.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocab.json in " + dir);
  out << header.dump(2) << '\n';
}

}  // namespace rfwp
