// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0
//
// rfwp: data generation, training, evaluation, benchmarking, verification
// and checkpoint inspection.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "checks.hpp"
#include "rfwp/bench.hpp"
#include "rfwp/checkpoint.hpp"
#include "rfwp/config.hpp"
#include "rfwp/train.hpp"
#include "rfwp/version.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitBadInput = 2;

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ordered_json code_version() {
  return {{"git_head", rfwp::git_head()}, {"content_hash", rfwp::content_hash()}};
}

ordered_json manifest(const std::string& command, const ordered_json& settings, const ordered_json& seeds) {
  ordered_json m;
  m["command"] = command;
  m["code_version"] = code_version();
  m["settings"] = settings;
  m["seeds"] = seeds;
  return m;
}

// runs/<UTC timestamp>-<hash of the settings>, unique within the parent.
fs::path make_run_dir(const fs::path& parent, const ordered_json& settings) {
  const std::string text = settings.dump();
  const std::string hash = hex64(rfwp::fnv1a64(text.data(), text.size())).substr(0, 8);
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  fs::create_directories(parent);
  fs::path dir = parent / (stamp.str() + "-" + hash);
  for (int i = 1; fs::exists(dir); ++i) dir = parent / (stamp.str() + "-" + hash + "-" + std::to_string(i));
  fs::create_directory(dir);
  return dir;
}

// A TOML file, or a run manifest whose "settings" are reused.
rfwp::Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  rfwp::Config config;
  if (!path.empty()) {
    if (fs::path(path).extension() == ".json") {
      std::ifstream in(path);
      if (!in) throw rfwp::ConfigError("cannot open manifest " + path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw rfwp::ConfigError(path + ": " + e.what());
      }
      if (!j.contains("settings")) throw rfwp::ConfigError(path + ": no settings object");
      config = rfwp::Config::from_json(j["settings"]);
    } else {
      config = rfwp::Config::load(path);
    }
  }
  for (const auto& o : overrides) config.apply_override(o);
  return config;
}

std::vector<rfwp::Episode> split_of(const rfwp::RunConfig& rc, std::size_t split) {
  const std::size_t counts[3] = {rc.counts.train, rc.counts.valid, rc.counts.test};
  return rfwp::generate_split(rc.task, rc.data_seed, split, counts[split]);
}

ordered_json metrics_json(const rfwp::Metrics& m) {
  return {{"sequence_accuracy", m.sequence_accuracy},
          {"print_token_accuracy", m.print_token_accuracy},
          {"sequences", m.sequences},
          {"answer_tokens", m.answer_tokens}};
}

// gen ------------------------------------------------------------------------

struct GenArgs {
  std::string task = "code_exec";
  std::size_t depth = 10, max_args = 5, statements = 100, variables = 3, rejection_budget = 1000;
  bool allow_greater = false;
  std::uint64_t seed = 1;
  rfwp::SplitCounts counts;
  std::string out;
};

int run_gen(const GenArgs& a) {
  rfwp::TaskSpec spec;
  try {
    spec.kind = rfwp::parse_task(a.task);
    spec.code.n_statements = a.statements;
    spec.code.n_variables = a.variables;
    spec.code.allow_greater = a.allow_greater;
    spec.code.rejection_budget = a.rejection_budget;
    spec.listops.depth = a.depth;
    spec.listops.max_args = a.max_args;
    spec.validate();
  } catch (const std::logic_error& e) {
    throw rfwp::ConfigError(e.what());
  }
  fs::create_directories(a.out);
  rfwp::dataset_export(spec, a.seed, a.counts, a.out);
  const ordered_json settings = {
      {"task", spec.to_json()},
      {"counts", {{"train", a.counts.train}, {"valid", a.counts.valid}, {"test", a.counts.test}}}};
  write_json(fs::path(a.out) / "manifest.json", manifest("gen", settings, {{"data", a.seed}}));
  std::cout << a.out << '\n';
  return 0;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string runs_dir = "runs";
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const rfwp::RunConfig rc = rfwp::RunConfig::from_config(load_config(a.config, a.overrides));
  const ordered_json settings = rc.to_config().to_json();
  const fs::path dir = make_run_dir(a.runs_dir, settings);
  ordered_json m = manifest("train", settings, {{"data", rc.data_seed}, {"train", rc.train.seed}});
  m["resolved"] = rc.to_json();
  write_json(dir / "manifest.json", m);
  std::cerr << "run directory " << dir.string() << '\n';

  const auto train_set = split_of(rc, 0), valid_set = split_of(rc, 1), test_set = split_of(rc, 2);
  rfwp::Model<float> model(rc.model, rc.train.seed);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  const auto result = rfwp::train(model, train_set, valid_set, rc.task.kind, rc.train, [&](const rfwp::RunRecord& r) {
    const std::string line = r.to_json().dump();
    metrics << line << '\n';
    metrics.flush();
    if (!a.quiet && r.metrics.contains("valid")) std::cerr << line << '\n';
  });
  rfwp::save_checkpoint((dir / "model.ckpt").string(), model);

  rfwp::EvalOptions eval;
  eval.bptt_span = rc.train.bptt_span;
  eval.carryover = rc.train.carryover;
  ordered_json summary;
  summary["epochs_run"] = result.epochs_run;
  summary["steps"] = result.steps;
  summary["best_epoch"] = result.best_epoch;
  summary["best_valid"] = metrics_json(result.best_valid);
  summary["reached_target"] = result.reached_target;
  summary["test"] = metrics_json(rfwp::evaluate(model, test_set, rc.task.kind, eval));
  summary["wall_time"] = result.wall_time;
  write_json(dir / "summary.json", summary);
  std::cout << dir.string() << '\n';
  return 0;
}

// eval -----------------------------------------------------------------------

struct EvalArgs {
  std::string run;
  std::string checkpoint;
  std::string config;
  std::vector<std::string> overrides;
  std::string split = "test";
};

int run_eval(const EvalArgs& a) {
  std::string config = a.config, checkpoint = a.checkpoint;
  if (!a.run.empty()) {
    if (config.empty()) config = (fs::path(a.run) / "manifest.json").string();
    if (checkpoint.empty()) checkpoint = (fs::path(a.run) / "model.ckpt").string();
  }
  if (config.empty() || checkpoint.empty()) throw rfwp::ConfigError("eval needs --run, or --checkpoint and --config");
  const rfwp::RunConfig rc = rfwp::RunConfig::from_config(load_config(config, a.overrides));
  std::size_t split = 3;
  for (std::size_t s = 0; s < 3; ++s) {
    if (a.split == rfwp::kSplitNames[s]) split = s;
  }
  if (split == 3) throw rfwp::ConfigError("unknown split '" + a.split + "'");
  auto model = rfwp::load_checkpoint<float>(checkpoint);
  if (!(model->spec() == rc.model)) throw rfwp::ConfigError("checkpoint model does not match the configured model");
  rfwp::EvalOptions eval;
  eval.bptt_span = rc.train.bptt_span;
  eval.carryover = rc.train.carryover;
  const auto episodes = split_of(rc, split);
  ordered_json out;
  out["split"] = a.split;
  out["checkpoint"] = checkpoint;
  out["metrics"] = metrics_json(rfwp::evaluate(*model, episodes, rc.task.kind, eval));
  out["code_version"] = code_version();
  std::cout << out.dump(2) << '\n';
  return 0;
}

// bench ----------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> variants{"all"};
  std::vector<std::size_t> lengths{256, 1024, 4096};
  rfwp::BenchOptions options;
  std::string runs_dir = "runs";
  bool ordering = false;
};

int run_bench(const BenchArgs& a) {
  std::vector<rfwp::Variant> variants;
  for (const auto& name : a.variants) {
    if (name == "all") {
      variants.insert(variants.end(), rfwp::all_variants().begin(), rfwp::all_variants().end());
    } else {
      try {
        variants.push_back(rfwp::parse_variant(name));
      } catch (const std::exception& e) {
        throw rfwp::ConfigError(e.what());
      }
    }
  }
  const auto& o = a.options;
  ordered_json names = ordered_json::array();
  for (auto v : variants) names.push_back(std::string(rfwp::variant_name(v)));
  const ordered_json settings = {{"variants", names}, {"lengths", a.lengths},   {"d_model", o.d_model},
                                 {"heads", o.heads},  {"layers", o.n_layers},   {"ffn_dim", o.ffn_dim},
                                 {"chunk", o.chunk},  {"reps", o.reps}};
  const fs::path dir = make_run_dir(a.runs_dir, settings);
  write_json(dir / "manifest.json", manifest("bench", settings, {{"model", o.seed}}));
  const auto points = rfwp::scaling_sweep(variants, a.lengths, o);
  const std::string csv = rfwp::to_csv(points);
  std::ofstream(dir / "bench.csv", std::ios::binary | std::ios::trunc) << csv;
  std::cout << csv;
  if (a.ordering) {
    const std::size_t T = a.lengths.back();
    std::cerr << "throughput at T=" << T << ", fastest first\n";
    for (const auto& t : rfwp::ordering_report(variants, T, o)) {
      std::cerr << "  " << std::left << std::setw(14) << rfwp::variant_name(t.variant) << std::right << std::fixed
                << std::setprecision(0) << std::setw(10) << t.tokens_per_second << " tok/s  " << std::setprecision(2)
                << t.relative << '\n';
    }
  }
  std::cerr << "run directory " << dir.string() << '\n';
  return 0;
}

// verify ---------------------------------------------------------------------

int run_verify(std::size_t episodes) {
  using namespace rfwp::checks;
  const std::vector<std::function<CheckResult()>> suite = {
      sum_rule_equivalence, delta_retrieval,   reduction_identities, variant_oracles,
      layer_gradients,      tensor_gradients,  segment_carryover,    detachment,
      [episodes] { return task_oracles(episodes); }, dimensions, checkpoint_roundtrip,
  };
  std::vector<std::string> failed;
  std::cout << std::left << std::setw(34) << "invariant" << std::setw(8) << "result" << "detail\n";
  for (const auto& check : suite) {
    const CheckResult r = timed(check);
    if (!r.passed) failed.push_back(r.name);
    std::cout << std::left << std::setw(34) << r.name << std::setw(8) << (r.passed ? "pass" : "FAIL") << r.detail
              << '\n';
  }
  if (!failed.empty()) {
    std::cerr << "verify failed:";
    for (const auto& name : failed) std::cerr << ' ' << name << ';';
    std::cerr << '\n';
    return kExitFailure;
  }
  return 0;
}

// inspect --------------------------------------------------------------------

template <typename T>
void print_params(const rfwp::Model<T>& model) {
  for (const auto& p : model.params()) {
    std::cout << "  " << std::left << std::setw(28) << p->name() << rfwp::shape_string(p->value().shape()) << '\n';
  }
}

int run_inspect(const std::string& path) {
  const rfwp::CheckpointInfo info = rfwp::read_checkpoint_info(path);
  std::cout << "checkpoint  " << path << '\n'
            << "version     " << info.version << '\n'
            << "scalar      " << (info.scalar_bytes == 8 ? "float64" : "float32") << '\n'
            << "spec        " << info.spec.to_json().dump() << '\n'
            << "parameters  " << info.scalar_count << " (closed form " << rfwp::param_count(info.spec) << ")\n";
  if (info.scalar_bytes == 8) {
    print_params(*rfwp::load_checkpoint<double>(path));
  } else {
    print_params(*rfwp::load_checkpoint<float>(path));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent fast weight programmers: data, training, benchmarks and checks"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate train/valid/test JSONL splits and a vocab sidecar");
  gen_cmd->add_option("--task", gen.task, "code_exec or listops")->capture_default_str();
  gen_cmd->add_option("--depth", gen.depth, "ListOps nesting depth")->capture_default_str();
  gen_cmd->add_option("--max-args", gen.max_args, "ListOps arguments per operator")->capture_default_str();
  gen_cmd->add_option("--statements", gen.statements, "Code statements per episode")->capture_default_str();
  gen_cmd->add_option("--variables", gen.variables, "Code variables")->capture_default_str();
  gen_cmd->add_flag("--allow-greater", gen.allow_greater, "Also generate '>' conditions");
  gen_cmd->add_option("--rejection-budget", gen.rejection_budget)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--train", gen.counts.train)->capture_default_str();
  gen_cmd->add_option("--valid", gen.counts.valid)->capture_default_str();
  gen_cmd->add_option("--test", gen.counts.test)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes a run directory");
  train_cmd->add_option("-c,--config", train.config, "TOML config or a run manifest.json");
  train_cmd->add_option("-s,--set", train.overrides, "Override, section.key=value (repeatable)");
  train_cmd->add_option("--runs-dir", train.runs_dir)->capture_default_str();
  train_cmd->add_flag("-q,--quiet", train.quiet, "Do not echo validation records");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a generated split");
  eval_cmd->add_option("--run", eval.run, "Run directory from train");
  eval_cmd->add_option("--checkpoint", eval.checkpoint);
  eval_cmd->add_option("-c,--config", eval.config, "TOML config or run manifest.json");
  eval_cmd->add_option("-s,--set", eval.overrides, "Override, section.key=value (repeatable)");
  eval_cmd->add_option("--split", eval.split, "train, valid or test")->capture_default_str();

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Per-token cost and state size against sequence length");
  bench_cmd->add_option("--variants", bench.variants, "Variant names or 'all'")->delimiter(',');
  bench_cmd->add_option("--lengths", bench.lengths, "Sequence lengths")->delimiter(',');
  bench_cmd->add_option("--d-model", bench.options.d_model)->capture_default_str();
  bench_cmd->add_option("--heads", bench.options.heads)->capture_default_str();
  bench_cmd->add_option("--layers", bench.options.n_layers)->capture_default_str();
  bench_cmd->add_option("--ffn-dim", bench.options.ffn_dim)->capture_default_str();
  bench_cmd->add_option("--chunk", bench.options.chunk)->capture_default_str();
  bench_cmd->add_option("--reps", bench.options.reps)->capture_default_str();
  bench_cmd->add_option("--seed", bench.options.seed)->capture_default_str();
  bench_cmd->add_option("--runs-dir", bench.runs_dir)->capture_default_str();
  bench_cmd->add_flag("--ordering", bench.ordering, "Also report relative throughput at the longest length");

  std::size_t verify_episodes = 1000;
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suite");
  verify_cmd->add_option("--episodes", verify_episodes, "Episodes per task for the oracle check")
      ->capture_default_str();

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a checkpoint");
  inspect_cmd->add_option("checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitBadInput;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*bench_cmd) return run_bench(bench);
    if (*verify_cmd) return run_verify(verify_episodes);
    if (*inspect_cmd) return run_inspect(inspect_path);
  } catch (const rfwp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const rfwp::FormatError& e) {
    std::cerr << "bad checkpoint: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const rfwp::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
