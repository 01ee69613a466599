// Copyright 2026 The FedLAMA Simulator Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Experiment harness behind the `fedlama` command line tool: JSON config
// loading, per-seed runs with artifact export, baseline comparison, sweeps,
// the averaging-matrix checks and partition statistics.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedlama/artifacts.hpp"
#include "fedlama/comm_ledger.hpp"
#include "fedlama/error.hpp"
#include "fedlama/fed_data.hpp"
#include "fedlama/fed_runtime.hpp"
#include "fedlama/lama_sched.hpp"
#include "fedlama/theory_check.hpp"

#ifndef FEDLAMA_VERSION
#define FEDLAMA_VERSION "0.1.0"
#endif

namespace fedlama {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitCheck = 3;

struct ExperimentConfig {
  RunConfig run;
  std::string outputs = "out";
  std::vector<RunConfig> baselines;
  std::size_t repeats = 1;
};

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace config_detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(path + "." + it.key(), "unknown field");
  }
}

inline const json& object_at(const json& parent, const char* key, const std::string& path) {
  const json& v = parent.at(key);
  if (!v.is_object()) throw ConfigError(path + "." + key, "expected an object");
  return v;
}

template <typename T>
void read(const json& obj, const char* key, const std::string& path, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  const std::string field = path + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(field, "expected true/false");
    out = v.get<bool>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(field, "expected a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(field, "expected a number");
    out = v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(field, "expected a string");
    out = v.get<std::string>();
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

inline std::vector<std::size_t> read_index_list(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field, "expected an array of non-negative integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || (!e.is_number_unsigned() && e.get<std::int64_t>() < 0))
      throw ConfigError(field, "expected an array of non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

inline ModelSpec parse_model(const json& j, const std::string& path, ModelSpec spec) {
  reject_unknown(j, path, {"widths", "activations", "hidden_activation"});
  if (j.contains("widths")) spec.widths = read_index_list(j.at("widths"), path + ".widths");
  if (j.contains("activations") && j.contains("hidden_activation"))
    throw ConfigError(path, "give either activations or hidden_activation, not both");
  try {
    if (j.contains("activations")) {
      const json& a = j.at("activations");
      if (!a.is_array()) throw ConfigError(path + ".activations", "expected an array of names");
      spec.activations.clear();
      for (const auto& e : a) {
        if (!e.is_string()) throw ConfigError(path + ".activations", "expected an array of names");
        spec.activations.push_back(parse_activation(e.get<std::string>()));
      }
    } else if (j.contains("hidden_activation")) {
      std::string name;
      read(j, "hidden_activation", path, name);
      spec = ModelSpec::with_hidden(spec.widths, parse_activation(name));
    } else if (spec.activations.size() + 1 != spec.widths.size()) {
      const Activation hidden = spec.activations.empty() ? Activation::kRelu : spec.activations.front();
      spec = ModelSpec::with_hidden(spec.widths, hidden);
    }
  } catch (const InputError& e) {
    throw ConfigError(path + ".activations", e.what());
  }
  return spec;
}

inline DataSpec parse_data(const json& j, const std::string& path, DataSpec d) {
  reject_unknown(j, path,
                 {"source", "num_classes", "samples_per_class", "feature_dim", "cluster_spread", "separation",
                  "csv_path", "holdout_fraction", "partition", "alpha"});
  std::string source = d.source == DataSpec::Source::kCsv ? "csv" : "synthetic";
  read(j, "source", path, source);
  if (source == "csv") {
    d.source = DataSpec::Source::kCsv;
  } else if (source == "synthetic") {
    d.source = DataSpec::Source::kSynthetic;
  } else {
    throw ConfigError(path + ".source", "expected synthetic|csv");
  }
  read(j, "num_classes", path, d.num_classes);
  read(j, "samples_per_class", path, d.samples_per_class);
  read(j, "feature_dim", path, d.feature_dim);
  read(j, "cluster_spread", path, d.cluster_spread);
  read(j, "separation", path, d.separation);
  read(j, "csv_path", path, d.csv_path);
  read(j, "holdout_fraction", path, d.holdout_fraction);
  std::string part = d.partition == PartitionMode::kIid ? "iid" : "dirichlet";
  read(j, "partition", path, part);
  if (part == "iid") {
    d.partition = PartitionMode::kIid;
  } else if (part == "dirichlet") {
    d.partition = PartitionMode::kDirichlet;
  } else {
    throw ConfigError(path + ".partition", "expected iid|dirichlet");
  }
  read(j, "alpha", path, d.alpha);
  if (d.source == DataSpec::Source::kCsv && d.csv_path.empty()) throw ConfigError(path + ".csv_path", "required for csv");
  if (!(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0))
    throw ConfigError(path + ".holdout_fraction", "must be in (0, 1)");
  if (!(d.alpha > 0.0)) throw ConfigError(path + ".alpha", "must be > 0");
  if (!(d.cluster_spread > 0.0)) throw ConfigError(path + ".cluster_spread", "must be > 0");
  if (!(d.separation > 0.0)) throw ConfigError(path + ".separation", "must be > 0");
  if (d.num_classes == 0 || d.samples_per_class == 0 || d.feature_dim == 0)
    throw ConfigError(path, "num_classes, samples_per_class and feature_dim must be >= 1");
  return d;
}

// Fields of `j` override `base`.
inline RunConfig parse_run(const json& j, const std::string& path, RunConfig c) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  reject_unknown(j, path,
                 {"clients", "iterations", "lr", "batch_size", "tau_base", "phi", "active_ratio", "rule", "seed",
                  "eval_every", "warmup_iters", "per_client_cost", "epoch_shuffle", "schedule", "static_extended",
                  "model", "data"});
  read(j, "clients", path, c.clients);
  read(j, "iterations", path, c.iterations);
  read(j, "lr", path, c.lr);
  read(j, "batch_size", path, c.batch_size);
  read(j, "tau_base", path, c.tau_base);
  read(j, "phi", path, c.phi);
  read(j, "active_ratio", path, c.active_ratio);
  read(j, "seed", path, c.seed);
  read(j, "eval_every", path, c.eval_every);
  read(j, "warmup_iters", path, c.warmup_iters);
  read(j, "per_client_cost", path, c.per_client_cost);
  read(j, "epoch_shuffle", path, c.epoch_shuffle);
  std::string rule(rule_name(c.rule));
  read(j, "rule", path, rule);
  try {
    c.rule = parse_rule(rule);
  } catch (const InputError& e) {
    throw ConfigError(path + ".rule", e.what());
  }
  std::string sched = c.schedule == ScheduleMode::kAdaptive ? "adaptive" : "static";
  read(j, "schedule", path, sched);
  if (sched == "adaptive") {
    c.schedule = ScheduleMode::kAdaptive;
  } else if (sched == "static") {
    c.schedule = ScheduleMode::kStatic;
  } else {
    throw ConfigError(path + ".schedule", "expected adaptive|static");
  }
  if (j.contains("static_extended")) c.static_extended = read_index_list(j.at("static_extended"), path + ".static_extended");
  if (j.contains("model")) c.model = parse_model(object_at(j, "model", path), path + ".model", c.model);
  if (j.contains("data")) c.data = parse_data(object_at(j, "data", path), path + ".data", c.data);

  const auto check = [&](bool ok, const char* field, const char* msg) {
    if (!ok) throw ConfigError(path + "." + field, msg);
  };
  check(c.clients >= 1, "clients", "must be >= 1");
  check(c.iterations >= 1, "iterations", "must be >= 1");
  check(c.lr > 0.0 && std::isfinite(c.lr), "lr", "must be > 0");
  check(c.batch_size >= 1, "batch_size", "must be >= 1");
  check(c.tau_base >= 1, "tau_base", "must be >= 1");
  check(c.phi >= 1, "phi", "must be >= 1");
  check(c.active_ratio > 0.0 && c.active_ratio <= 1.0, "active_ratio", "must be in (0, 1]");
  check(c.model.widths.size() >= 3, "model.widths", "need at least two dense layers");
  check(c.model.activations.back() == Activation::kIdentity, "model.activations", "last activation must be identity");
  for (auto w : c.model.widths) check(w >= 1, "model.widths", "widths must be >= 1");
  for (auto l : c.static_extended)
    check(l + 1 < c.model.widths.size(), "static_extended", "layer index out of range");
  if (c.data.source == DataSpec::Source::kSynthetic) {
    check(c.model.widths.front() == c.data.feature_dim, "model.widths", "input width must equal data.feature_dim");
    check(c.model.widths.back() >= c.data.num_classes, "model.widths", "output width must be >= data.num_classes");
    const std::size_t n = c.data.num_classes * c.data.samples_per_class;
    const auto train = n - static_cast<std::size_t>(std::llround(c.data.holdout_fraction * static_cast<double>(n)));
    check(c.clients <= train, "clients", "more clients than training samples");
  }
  return c;
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json acts = nlohmann::json::array();
  for (auto a : c.model.activations) acts.push_back(std::string(activation_name(a)));
  nlohmann::json data{{"source", c.data.source == DataSpec::Source::kCsv ? "csv" : "synthetic"},
                      {"num_classes", c.data.num_classes},
                      {"samples_per_class", c.data.samples_per_class},
                      {"feature_dim", c.data.feature_dim},
                      {"cluster_spread", c.data.cluster_spread},
                      {"separation", c.data.separation},
                      {"csv_path", c.data.csv_path},
                      {"holdout_fraction", c.data.holdout_fraction},
                      {"partition", c.data.partition == PartitionMode::kIid ? "iid" : "dirichlet"},
                      {"alpha", c.data.alpha}};
  return {{"clients", c.clients},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"tau_base", c.tau_base},
          {"phi", c.phi},
          {"active_ratio", c.active_ratio},
          {"rule", std::string(rule_name(c.rule))},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"warmup_iters", c.warmup_iters},
          {"per_client_cost", c.per_client_cost},
          {"epoch_shuffle", c.epoch_shuffle},
          {"schedule", c.schedule == ScheduleMode::kAdaptive ? "adaptive" : "static"},
          {"static_extended", c.static_extended},
          {"model", {{"widths", c.model.widths}, {"activations", acts}}},
          {"data", data}};
}

inline nlohmann::json to_json(const ExperimentConfig& e) {
  nlohmann::json baselines = nlohmann::json::array();
  for (const auto& b : e.baselines) baselines.push_back(to_json(b));
  return {{"run", to_json(e.run)}, {"outputs", e.outputs}, {"repeats", e.repeats}, {"baselines", baselines}};
}

// Accepts an experiment config or a manifest written by cmd_run (its
// "config" member is used).
inline ExperimentConfig parse_experiment(const nlohmann::json& root) {
  using namespace config_detail;
  if (!root.is_object()) throw ConfigError("$", "expected a JSON object");
  if (root.contains("manifest_version")) {
    if (!root.contains("config")) throw ConfigError("$.config", "manifest has no config");
    return parse_experiment(root.at("config"));
  }
  reject_unknown(root, "$", {"run", "outputs", "repeats", "baselines"});
  ExperimentConfig e;
  if (root.contains("run")) e.run = parse_run(root.at("run"), "$.run", RunConfig{});
  read(root, "outputs", "$", e.outputs);
  read(root, "repeats", "$", e.repeats);
  if (e.repeats == 0) throw ConfigError("$.repeats", "must be >= 1");
  if (root.contains("baselines")) {
    const auto& b = root.at("baselines");
    if (!b.is_array()) throw ConfigError("$.baselines", "expected an array of run overrides");
    for (std::size_t i = 0; i < b.size(); ++i)
      e.baselines.push_back(parse_run(b[i], "$.baselines[" + std::to_string(i) + "]", e.run));
  }
  return e;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("$", "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("$", std::string("invalid JSON: ") + e.what());
  }
  return parse_experiment(j);
}

// ---------------------------------------------------------------------------
// Commands

// FEDLAMA_THREADS caps the worker count; default is the core count.
inline std::size_t threads_from_env() {
  if (const char* s = std::getenv("FEDLAMA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end != s && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct CommonOverrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> repeats;
  std::optional<AdjustRule> rule;
  bool per_client_cost = false;
};

inline void apply(const CommonOverrides& o, ExperimentConfig& e) {
  if (o.out) e.outputs = *o.out;
  if (o.repeats) e.repeats = *o.repeats;
  const auto patch = [&](RunConfig& c) {
    if (o.seed) c.seed = *o.seed;
    if (o.rule) c.rule = *o.rule;
    if (o.per_client_cost) c.per_client_cost = true;
  };
  patch(e.run);
  for (auto& b : e.baselines) patch(b);
}

inline std::vector<std::uint64_t> seed_list(const RunConfig& c, std::size_t repeats) {
  std::vector<std::uint64_t> s;
  for (std::size_t r = 0; r < repeats; ++r) s.push_back(c.seed + r);
  return s;
}

inline RunConfig with_seed(RunConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline void write_run_artifacts(const std::filesystem::path& dir, const RunResult& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.csv", std::ios::binary);
    write_metrics_csv(os, r.metrics);
  }
  {
    std::ofstream os(dir / "events.jsonl", std::ios::binary);
    write_events_jsonl(os, r.events);
  }
  {
    std::ofstream os(dir / "ledger.csv", std::ios::binary);
    write_ledger_csv(os, r.ledger);
  }
  {
    std::ofstream os(dir / "curves.csv", std::ios::binary);
    write_curves_csv(os, r.adjustments);
  }
  {
    std::ofstream os(dir / "model.bin", std::ios::binary);
    write_model_binary(os, r.final_model);
  }
}

inline std::string seed_dir_name(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

// Runs every seed of the experiment and writes <out>/seed-<s>/... plus
// <out>/manifest.json. Returns kExitRuntime if any run aborted.
inline int cmd_run(ExperimentConfig e, std::ostream& log = std::cout, std::size_t threads = threads_from_env()) {
  namespace fs = std::filesystem;
  const fs::path out(e.outputs);
  try {
    fs::create_directories(out);
  } catch (const fs::filesystem_error& err) {
    log << "error: cannot create output directory: " << err.what() << '\n';
    return kExitConfig;
  }
  nlohmann::json manifest{{"manifest_version", 1},
                          {"code_version", FEDLAMA_VERSION},
                          {"config", to_json(e)},
                          {"seeds", seed_list(e.run, e.repeats)},
                          {"started_at", utc_timestamp()}};
  nlohmann::json runs = nlohmann::json::array();
  int status = kExitOk;
  for (auto seed : seed_list(e.run, e.repeats)) {
    RunResult r;
    try {
      r = run(with_seed(e.run, seed), {threads, nullptr});
    } catch (const std::invalid_argument& err) {
      log << "error: seed " << seed << ": " << err.what() << '\n';
      return kExitConfig;
    }
    write_run_artifacts(out / seed_dir_name(seed), r);
    for (const auto& w : r.warnings) log << "warning: " << w << '\n';
    runs.push_back({{"seed", seed},
                    {"iterations_requested", e.run.iterations},
                    {"iterations_effective", r.iterations},
                    {"warnings", r.warnings},
                    {"status", r.ok() ? "ok" : "aborted"},
                    {"artifacts", seed_dir_name(seed)}});
    if (!r.ok()) {
      log << "error: seed " << seed << " aborted at iteration " << r.abort->iteration << " (client "
          << r.abort->client << ": non-finite loss)\n";
      status = kExitRuntime;
      break;
    }
    log << "seed " << seed << ": final accuracy " << shortest(r.final_accuracy()) << ", comm cost "
        << total_cost(r.ledger) << '\n';
  }
  manifest["runs"] = runs;
  manifest["finished_at"] = utc_timestamp();
  std::ofstream(out / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  return status;
}

struct SettingSummary {
  std::string label;
  std::size_t tau_base = 0;
  std::size_t phi = 0;
  std::vector<double> accuracy;    // per seed, percent
  std::vector<double> rel_cost;    // per seed, percent of the baseline
  std::vector<std::uint64_t> cost; // per seed

  double mean_accuracy() const {
    double s = 0.0;
    for (double a : accuracy) s += a;
    return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
  }
  // Sample standard deviation; 0 for a single seed.
  double sd_accuracy() const {
    if (accuracy.size() < 2) return 0.0;
    const double mu = mean_accuracy();
    double s = 0.0;
    for (double a : accuracy) s += (a - mu) * (a - mu);
    return std::sqrt(s / static_cast<double>(accuracy.size() - 1));
  }
  double mean_rel_cost() const {
    double s = 0.0;
    for (double c : rel_cost) s += c;
    return rel_cost.empty() ? 0.0 : s / static_cast<double>(rel_cost.size());
  }
};

struct CompareResult {
  SettingSummary baseline;
  SettingSummary candidate;
  double delta_accuracy() const { return candidate.mean_accuracy() - baseline.mean_accuracy(); }
};

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline std::string format_comparison(const CompareResult& c) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "setting" << std::setw(8) << "tau'" << std::setw(6) << "phi" << std::setw(22)
     << "Validation acc." << "Comm. cost\n";
  for (const auto* s : {&c.baseline, &c.candidate}) {
    os << std::left << std::setw(12) << s->label << std::setw(8) << s->tau_base << std::setw(6) << s->phi
       << std::setw(22) << (fixed2(s->mean_accuracy()) + " +- " + fixed2(s->sd_accuracy()) + " %")
       << fixed2(s->mean_rel_cost()) << "%\n";
  }
  os << "delta acc: " << fixed2(c.delta_accuracy()) << " pp\n";
  return os.str();
}

// Runs `baseline` and `candidate` for the same seeds and reports accuracy
// (mean +- sd over seeds) and communication cost relative to the baseline.
inline CompareResult compare_runs(const RunConfig& baseline, const RunConfig& candidate, std::size_t repeats,
                                  std::size_t threads = threads_from_env()) {
  if (!(baseline.model == candidate.model)) throw ConfigError("model", "compared settings use different models");
  if (!(baseline.data == candidate.data) || baseline.clients != candidate.clients)
    throw ConfigError("data", "compared settings use different data or client counts");
  CompareResult res;
  res.baseline = {"baseline", baseline.tau_base, baseline.phi, {}, {}, {}};
  res.candidate = {"candidate", candidate.tau_base, candidate.phi, {}, {}, {}};
  for (auto seed : seed_list(baseline, repeats)) {
    const auto a = run(with_seed(baseline, seed), {threads, nullptr});
    const auto b = run(with_seed(candidate, seed), {threads, nullptr});
    if (!a.ok() || !b.ok()) throw std::runtime_error("a compared run aborted on a non-finite loss");
    res.baseline.accuracy.push_back(100.0 * a.final_accuracy());
    res.candidate.accuracy.push_back(100.0 * b.final_accuracy());
    res.baseline.cost.push_back(total_cost(a.ledger));
    res.candidate.cost.push_back(total_cost(b.ledger));
    res.baseline.rel_cost.push_back(100.0);
    res.candidate.rel_cost.push_back(relative_cost(b.ledger, a.ledger));
  }
  return res;
}

inline int cmd_compare(const ExperimentConfig& baseline, const ExperimentConfig& candidate, std::ostream& out,
                       std::size_t threads = threads_from_env()) {
  CompareResult res;
  try {
    res = compare_runs(baseline.run, candidate.run, baseline.repeats, threads);
  } catch (const ConfigError& e) {
    out << "error: refusing to compare: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::runtime_error& e) {
    out << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  out << format_comparison(res);
  return kExitOk;
}

enum class SweepAxis { kPhi, kAlpha, kActiveRatio, kTauBase };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "phi") return SweepAxis::kPhi;
  if (s == "alpha") return SweepAxis::kAlpha;
  if (s == "active_ratio") return SweepAxis::kActiveRatio;
  if (s == "tau_base") return SweepAxis::kTauBase;
  throw ConfigError("--axis", "expected phi|alpha|active_ratio|tau_base");
}

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kPhi: return "phi";
    case SweepAxis::kAlpha: return "alpha";
    case SweepAxis::kActiveRatio: return "active_ratio";
    case SweepAxis::kTauBase: return "tau_base";
  }
  return "phi";
}

inline RunConfig with_axis(RunConfig c, SweepAxis axis, double v) {
  const auto as_count = [&](const char* name) {
    if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError(std::string("--values"), std::string(name) + " values must be integers >= 1");
    return static_cast<std::size_t>(v);
  };
  switch (axis) {
    case SweepAxis::kPhi: c.phi = as_count("phi"); break;
    case SweepAxis::kTauBase: c.tau_base = as_count("tau_base"); break;
    case SweepAxis::kAlpha:
      if (!(v > 0.0)) throw ConfigError("--values", "alpha values must be > 0");
      c.data.alpha = v;
      c.data.partition = PartitionMode::kDirichlet;
      break;
    case SweepAxis::kActiveRatio:
      if (!(v > 0.0 && v <= 1.0)) throw ConfigError("--values", "active_ratio values must be in (0, 1]");
      c.active_ratio = v;
      break;
  }
  return c;
}

struct SweepRow {
  double axis_value = 0.0;
  std::uint64_t seed = 0;
  double final_acc = 0.0;
  double rel_cost = 0.0;
  double mean_discrepancy = 0.0;
  double label_entropy = 0.0;
};

// Relative cost is measured against FedAvg with the base config's tau_base
// over the same effective iteration count.
inline std::vector<SweepRow> sweep(const ExperimentConfig& e, SweepAxis axis, const std::vector<double>& values,
                                   std::size_t threads = threads_from_env()) {
  std::vector<SweepRow> rows;
  for (double v : values) {
    const RunConfig c = with_axis(e.run, axis, v);
    for (auto seed : seed_list(c, e.repeats)) {
      const auto r = run(with_seed(c, seed), {threads, nullptr});
      if (!r.ok()) throw std::runtime_error("sweep run aborted on a non-finite loss");
      const std::size_t participants =
          std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c.active_ratio * static_cast<double>(c.clients))));
      const auto base = simulate_static(r.ledger.dims(), Schedule::uniform(r.ledger.num_layers(), e.run.tau_base, 1),
                                        r.iterations, participants, c.per_client_cost);
      rows.push_back({v, seed, r.final_accuracy(), relative_cost(r.ledger, base), r.mean_discrepancy(),
                      r.label_entropy});
    }
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows) {
  os << "axis,axis_value,seed,final_acc,rel_cost,mean_discrepancy,label_entropy\n";
  for (const auto& r : rows)
    os << axis_name(axis) << ',' << shortest(r.axis_value) << ',' << r.seed << ',' << shortest(r.final_acc) << ','
       << fixed2(r.rel_cost) << ',' << shortest(r.mean_discrepancy) << ',' << shortest(r.label_entropy) << '\n';
}

inline int cmd_sweep(const ExperimentConfig& e, const std::string& axis_name_str, const std::vector<double>& values,
                     std::ostream& log, std::size_t threads = threads_from_env()) {
  std::vector<SweepRow> rows;
  SweepAxis axis{};
  try {
    axis = parse_axis(axis_name_str);
    if (values.empty()) throw ConfigError("--values", "need at least one value");
    for (double v : values) (void)with_axis(e.run, axis, v);
    rows = sweep(e, axis, values, threads);
  } catch (const ConfigError& err) {
    log << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& err) {
    log << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const std::runtime_error& err) {
    log << "error: " << err.what() << '\n';
    return kExitRuntime;
  }
  std::filesystem::create_directories(e.outputs);
  const auto path = std::filesystem::path(e.outputs) / ("sweep_" + axis_name(axis) + ".csv");
  std::ofstream os(path, std::ios::binary);
  write_sweep_csv(os, axis, rows);
  log << "wrote " << rows.size() << " rows to " << path.string() << '\n';
  return kExitOk;
}

struct TheoryCheckOptions {
  BatteryOptions battery;
  std::optional<std::string> dump_dir;
  std::optional<std::string> fixture;  // CSV matrix to validate as an averaging matrix
  std::size_t fixture_clients = 2;
};

inline void print_tally(std::ostream& out, const std::vector<PropertyTally>& rows) {
  out << std::left << std::setw(48) << "property" << std::setw(8) << "cases" << std::setw(16) << "max dev"
      << std::setw(10) << "tol" << "result\n";
  for (const auto& r : rows)
    out << std::left << std::setw(48) << r.name << std::setw(8) << r.checked << std::setw(16) << r.max_deviation
        << std::setw(10) << r.tolerance << (r.pass ? "PASS" : "FAIL") << '\n';
}

inline int cmd_theory_check(const TheoryCheckOptions& opt, std::ostream& out) {
  if (opt.fixture) {
    Matrix a;
    try {
      a = read_matrix_csv(*opt.fixture);
    } catch (const InputError& e) {
      out << "error: " << e.what() << '\n';
      return kExitConfig;
    }
    const auto rows = check_averaging_matrix(a, opt.fixture_clients);
    print_tally(out, rows);
    const bool ok = std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.pass; });
    return ok ? kExitOk : kExitCheck;
  }
  BatteryReport rep;
  try {
    rep = run_theory_battery(opt.battery);
  } catch (const InputError& e) {
    out << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  out << "instances: " << rep.instances.size() << " (" << rep.lemma_applicable
      << " with a coordinate never averaged)\n";
  print_tally(out, rep.rows);
  if (opt.dump_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(*opt.dump_dir);
    for (std::size_t i = 0; i < rep.instances.size(); ++i) {
      const auto& inst = rep.instances[i];
      const std::string stem = "instance_" + std::to_string(i);
      for (std::size_t f = 0; f < inst.masks.size(); ++f) {
        std::ofstream os(fs::path(*opt.dump_dir) / (stem + "_P" + std::to_string(f) + ".csv"));
        write_matrix_csv(os, build_P(inst.masks[f]));
      }
      std::ofstream os(fs::path(*opt.dump_dir) / (stem + "_product.csv"));
      write_matrix_csv(os, inst.check.product);
      std::ofstream js(fs::path(*opt.dump_dir) / (stem + "_J.csv"));
      write_matrix_csv(js, build_J(inst.check.m, inst.check.d));
    }
  }
  return rep.pass() ? kExitOk : kExitCheck;
}

// client,n_i,p_i,label_entropy,count_0,...,count_{C-1}
inline int cmd_partition_stats(const ExperimentConfig& e, std::ostream& out) {
  RunSetup setup;
  try {
    setup = prepare_run(e.run);
  } catch (const std::invalid_argument& err) {
    out << "error: " << err.what() << '\n';
    return kExitConfig;
  }
  out << "client,n_i,p_i,label_entropy";
  for (std::size_t c = 0; c < setup.train.num_classes; ++c) out << ",count_" << c;
  out << '\n';
  for (std::size_t i = 0; i < setup.shards.size(); ++i) {
    std::vector<std::size_t> counts(setup.train.num_classes, 0);
    for (auto idx : setup.shards[i].indices) ++counts[setup.train.labels[idx]];
    out << i << ',' << setup.shards[i].size() << ',' << shortest(setup.weights[i]) << ','
        << shortest(label_entropy(setup.train, setup.shards[i]));
    for (auto n : counts) out << ',' << n;
    out << '\n';
  }
  out << "# mean_label_entropy," << shortest(mean_label_entropy(setup.train, setup.shards)) << '\n';
  return kExitOk;
}

}  // namespace fedlama
