// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. Files use a TOML subset: `[section]` headers, and
// `key = value` lines whose value is a quoted string, an integer, a float or
// a boolean; `#` starts a comment. Keys are addressed as "section.key".

#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <string>
#include <variant>

#include "rfwp/model.hpp"
#include "rfwp/tasks.hpp"
#include "rfwp/train.hpp"

namespace rfwp {

// Malformed config text or an unknown/ill-typed key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ConfigValue = std::variant<bool, std::int64_t, double, std::string>;

class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<config>");
  static Config load(const std::string& path);
  // Flat {"section.key": value} object as produced by to_json.
  static Config from_json(const nlohmann::json& j);

  // "section.key=value"; unquoted values that are not numbers or booleans
  // are taken as strings.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, ConfigValue value) { values_[key] = std::move(value); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, ConfigValue>& values() const noexcept { return values_; }
  nlohmann::ordered_json to_json() const;

 private:
  std::map<std::string, ConfigValue> values_;
};

// Everything a training run needs, resolved from a Config.
struct RunConfig {
  TaskSpec task;
  SplitCounts counts;
  std::uint64_t data_seed = 1;
  ModelSpec model;
  TrainConfig train;

  // Throws ConfigError for unknown keys, wrong types or invalid values.
  static RunConfig from_config(const Config& config);
  // Every key with its resolved value; from_config(to_config()) reproduces
  // this configuration.
  Config to_config() const;
  nlohmann::ordered_json to_json() const;
};

}  // namespace rfwp
