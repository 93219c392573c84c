// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/config.hpp"

#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

namespace rfwp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_identifier(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

bool is_key_path(const std::string& s) {
  std::size_t start = 0;
  while (true) {
    const auto dot = s.find('.', start);
    if (!is_identifier(s.substr(start, dot == std::string::npos ? std::string::npos : dot - start))) return false;
    if (dot == std::string::npos) return true;
    start = dot + 1;
  }
}

// Position of a `#` that is not inside a quoted string.
std::size_t comment_start(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && quoted) {
      ++i;
    } else if (line[i] == '"') {
      quoted = !quoted;
    } else if (line[i] == '#' && !quoted) {
      return i;
    }
  }
  return std::string::npos;
}

std::optional<ConfigValue> parse_scalar(const std::string& text) {
  if (text == "true") return ConfigValue(true);
  if (text == "false") return ConfigValue(false);
  if (text.empty()) return std::nullopt;
  char* end = nullptr;
  const bool integral = text.find_first_of(".eEn") == std::string::npos;  // "n" rejects nan/inf
  if (integral) {
    errno = 0;
    const long long v = std::strtoll(text.c_str(), &end, 10);
    if (*end == '\0' && errno == 0) return ConfigValue(static_cast<std::int64_t>(v));
    return std::nullopt;
  }
  const double d = std::strtod(text.c_str(), &end);
  if (*end == '\0' && end != text.c_str()) return ConfigValue(d);
  return std::nullopt;
}

ConfigValue parse_value(const std::string& text, const std::string& where) {
  if (!text.empty() && text.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < text.size() && text[i] != '"'; ++i) {
      if (text[i] == '\\' && i + 1 < text.size()) {
        const char c = text[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        out += text[i];
      }
    }
    if (i != text.size() - 1) throw ConfigError(where + ": malformed string " + text);
    return out;
  }
  if (auto v = parse_scalar(text)) return *v;
  throw ConfigError(where + ": cannot parse value '" + text + "'");
}

std::string type_name(const ConfigValue& v) {
  switch (v.index()) {
    case 0: return "boolean";
    case 1: return "integer";
    case 2: return "float";
    default: return "string";
  }
}

class Reader {
 public:
  explicit Reader(const Config& c) : config_(c) {}

  template <typename F>
  void visit(const std::string& key, F&& assign) {
    const auto it = config_.values().find(key);
    if (it == config_.values().end()) return;
    used_.insert(key);
    try {
      assign(it->second);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }

  void size(const std::string& key, std::size_t& out) {
    visit(key, [&](const ConfigValue& v) {
      const auto* i = std::get_if<std::int64_t>(&v);
      if (!i) throw ConfigError("expected an integer, got " + type_name(v));
      if (*i < 0) throw ConfigError("must not be negative");
      out = static_cast<std::size_t>(*i);
    });
  }
  void u64(const std::string& key, std::uint64_t& out) {
    std::size_t v = out;
    size(key, v);
    out = v;
  }
  void real(const std::string& key, double& out) {
    visit(key, [&](const ConfigValue& v) {
      if (const auto* i = std::get_if<std::int64_t>(&v)) {
        out = double(*i);
      } else if (const auto* d = std::get_if<double>(&v)) {
        out = *d;
      } else {
        throw ConfigError("expected a number, got " + type_name(v));
      }
    });
  }
  void flag(const std::string& key, bool& out) {
    visit(key, [&](const ConfigValue& v) {
      const auto* b = std::get_if<bool>(&v);
      if (!b) throw ConfigError("expected a boolean, got " + type_name(v));
      out = *b;
    });
  }
  void text(const std::string& key, std::string& out) {
    visit(key, [&](const ConfigValue& v) {
      const auto* s = std::get_if<std::string>(&v);
      if (!s) throw ConfigError("expected a string, got " + type_name(v));
      out = *s;
    });
  }

  void reject_unused() const {
    for (const auto& [key, value] : config_.values()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
  }

 private:
  const Config& config_;
  std::set<std::string> used_;
};

}  // namespace

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto hash = comment_start(raw);
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!is_key_path(section)) throw ConfigError(where + ": bad section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!is_key_path(key)) throw ConfigError(where + ": bad key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (c.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    c.values_[full] = parse_value(trim(line.substr(eq + 1)), where);
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string text = trim(assignment.substr(eq + 1));
  if (!is_key_path(key)) throw ConfigError("bad override key '" + key + "'");
  if (!text.empty() && text.front() == '"') {
    values_[key] = parse_value(text, "override " + key);
  } else if (auto v = parse_scalar(text)) {
    values_[key] = *v;
  } else {
    values_[key] = text;
  }
}

nlohmann::ordered_json Config::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [key, value] : values_) {
    std::visit([&](const auto& v) { j[key] = v; }, value);
  }
  return j;
}

Config Config::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("settings must be a JSON object");
  Config c;
  for (const auto& [key, value] : j.items()) {
    if (!is_key_path(key)) throw ConfigError("bad settings key '" + key + "'");
    if (value.is_boolean()) {
      c.values_[key] = value.get<bool>();
    } else if (value.is_number_integer()) {
      c.values_[key] = value.get<std::int64_t>();
    } else if (value.is_number_float()) {
      c.values_[key] = value.get<double>();
    } else if (value.is_string()) {
      c.values_[key] = value.get<std::string>();
    } else {
      throw ConfigError("settings key '" + key + "' has an unsupported type");
    }
  }
  return c;
}

RunConfig RunConfig::from_config(const Config& config) {
  RunConfig rc;
  Reader r(config);
  try {
    std::string task = task_name(rc.task.kind);
    r.text("task.name", task);
    rc.task.kind = parse_task(task);
    r.size("task.statements", rc.task.code.n_statements);
    r.size("task.variables", rc.task.code.n_variables);
    r.flag("task.allow_greater", rc.task.code.allow_greater);
    r.size("task.rejection_budget", rc.task.code.rejection_budget);
    r.size("task.depth", rc.task.listops.depth);
    r.size("task.max_args", rc.task.listops.max_args);
    rc.task.validate();

    r.size("data.train", rc.counts.train);
    r.size("data.valid", rc.counts.valid);
    r.size("data.test", rc.counts.test);
    r.u64("data.seed", rc.data_seed);

    ModelSpec& m = rc.model;
    std::string arch = "stack", variant(variant_name(m.variant)), positional;
    r.text("model.arch", arch);
    if (arch == "stack") {
      m.arch = Arch::Stack;
    } else if (arch == "lstm") {
      m.arch = Arch::Lstm;
      m.n_layers = 1;
      m.d_model = 256;
    } else {
      throw ConfigError("model.arch: expected stack or lstm, got '" + arch + "'");
    }
    r.text("model.variant", variant);
    m.variant = parse_variant(variant);
    r.size("model.layers", m.n_layers);
    r.size("model.d_model", m.d_model);
    r.size("model.heads", m.heads);
    r.size("model.ffn_dim", m.ffn_dim);
    r.size("model.mlp_depth", m.mlp_depth);
    r.size("model.embed_dim", m.embed_dim);
    r.real("model.dropout", m.dropout);
    m.positional = m.arch == Arch::Stack && m.variant == Variant::Softmax ? Positional::Sinusoidal : Positional::None;
    r.text("model.positional", positional);
    if (positional == "none") {
      m.positional = Positional::None;
    } else if (positional == "sinusoidal") {
      m.positional = Positional::Sinusoidal;
    } else if (!positional.empty()) {
      throw ConfigError("model.positional: expected none or sinusoidal");
    }
    const Vocab& vocab = vocab_for(rc.task.kind);
    m.vocab_in = vocab.input.size();
    m.vocab_out = vocab.output.size();
    m.validate();

    TrainConfig& t = rc.train;
    r.real("optimizer.lr", t.adam.lr);
    r.real("optimizer.beta1", t.adam.beta1);
    r.real("optimizer.beta2", t.adam.beta2);
    r.real("optimizer.eps", t.adam.eps);
    r.size("optimizer.warmup_steps", t.warmup_steps);
    double clip = 0.0;
    r.real("optimizer.clip_norm", clip);
    if (clip != 0.0) t.clip_norm = clip;
    r.size("train.batch_size", t.batch_size);
    r.size("train.bptt_span", t.bptt_span);
    r.flag("train.carryover", t.carryover);
    r.size("train.epochs", t.epochs);
    r.u64("train.seed", t.seed);
    r.size("train.eval_every", t.eval_every);
    r.size("train.threads", t.threads);
    double target = -1.0;
    r.real("train.target_accuracy", target);
    if (target >= 0.0) t.target_accuracy = target;
    r.real("train.max_seconds", t.max_seconds);
    t.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::logic_error& e) {
    throw ConfigError(e.what());
  }
  r.reject_unused();
  return rc;
}

Config RunConfig::to_config() const {
  Config c;
  auto size = [&](const char* key, std::size_t v) { c.set(key, static_cast<std::int64_t>(v)); };
  c.set("task.name", task_name(task.kind));
  size("task.statements", task.code.n_statements);
  size("task.variables", task.code.n_variables);
  c.set("task.allow_greater", task.code.allow_greater);
  size("task.rejection_budget", task.code.rejection_budget);
  size("task.depth", task.listops.depth);
  size("task.max_args", task.listops.max_args);
  size("data.train", counts.train);
  size("data.valid", counts.valid);
  size("data.test", counts.test);
  size("data.seed", data_seed);
  c.set("model.arch", std::string(model.arch == Arch::Lstm ? "lstm" : "stack"));
  c.set("model.variant", std::string(variant_name(model.variant)));
  size("model.layers", model.n_layers);
  size("model.d_model", model.d_model);
  size("model.heads", model.heads);
  size("model.ffn_dim", model.ffn_dim);
  size("model.mlp_depth", model.mlp_depth);
  size("model.embed_dim", model.embed_dim);
  c.set("model.dropout", model.dropout);
  c.set("model.positional", std::string(model.positional == Positional::Sinusoidal ? "sinusoidal" : "none"));
  c.set("optimizer.lr", train.adam.lr);
  c.set("optimizer.beta1", train.adam.beta1);
  c.set("optimizer.beta2", train.adam.beta2);
  c.set("optimizer.eps", train.adam.eps);
  size("optimizer.warmup_steps", train.warmup_steps);
  c.set("optimizer.clip_norm", train.clip_norm.value_or(0.0));
  size("train.batch_size", train.batch_size);
  size("train.bptt_span", train.bptt_span);
  c.set("train.carryover", train.carryover);
  size("train.epochs", train.epochs);
  size("train.seed", train.seed);
  size("train.eval_every", train.eval_every);
  size("train.threads", train.threads);
  c.set("train.target_accuracy", train.target_accuracy.value_or(-1.0));
  c.set("train.max_seconds", train.max_seconds);
  return c;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task.to_json();
  j["data"] = {{"train", counts.train}, {"valid", counts.valid}, {"test", counts.test}, {"seed", data_seed}};
  j["model"] = model.to_json();
  j["train"] = train.to_json();
  return j;
}

}  // namespace rfwp
