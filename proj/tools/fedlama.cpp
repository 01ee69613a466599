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

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedlama/exp_cli.hpp"

namespace {

std::optional<fedlama::ExperimentConfig> load_or_report(const std::string& path,
                                                        const fedlama::CommonOverrides& overrides) {
  try {
    auto e = fedlama::load_experiment(path);
    fedlama::apply(overrides, e);
    return e;
  } catch (const fedlama::ConfigError& err) {
    std::cerr << "config error in " << path << ": " << err.what() << '\n';
    return std::nullopt;
  }
}

void add_common(CLI::App* cmd, fedlama::CommonOverrides& o, std::string& rule) {
  cmd->add_option_function<std::string>("--out", [&o](const std::string& v) { o.out = v; }, "Output directory");
  cmd->add_option_function<std::uint64_t>("--seed", [&o](std::uint64_t v) { o.seed = v; }, "First seed");
  cmd->add_option_function<std::size_t>("--repeats", [&o](std::size_t v) { o.repeats = v; }, "Number of seeds")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--rule", rule, "Interval adjustment rule")->check(CLI::IsMember({"cross", "literal"}));
  cmd->add_flag("--per-client-cost", o.per_client_cost, "Count 2 x participants units per sync");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise adaptive federated averaging simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FEDLAMA_VERSION);

  fedlama::CommonOverrides overrides;
  std::string rule;
  std::vector<std::string> configs;

  auto* run_cmd = app.add_subcommand("run", "Run an experiment config and write its artifacts");
  run_cmd->add_option("--config", configs, "Experiment or manifest JSON")->required()->expected(1);
  add_common(run_cmd, overrides, rule);

  auto* compare_cmd = app.add_subcommand("compare", "Compare a setting against a baseline (first config)");
  compare_cmd->add_option("--config", configs, "Baseline config, then candidate config")->required()->expected(1, 2);
  add_common(compare_cmd, overrides, rule);

  std::string axis;
  std::vector<double> values;
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep one setting and write a long-form CSV");
  sweep_cmd->add_option("--config", configs, "Experiment JSON")->required()->expected(1);
  sweep_cmd->add_option("--axis", axis, "phi|alpha|active_ratio|tau_base")->required();
  sweep_cmd->add_option("--values", values, "Comma separated values")->required()->delimiter(',');
  add_common(sweep_cmd, overrides, rule);

  fedlama::TheoryCheckOptions theory;
  auto* theory_cmd = app.add_subcommand("theory-check", "Check averaging-matrix properties numerically");
  theory_cmd->add_option("--instances", theory.battery.instances, "Random (m, d, masks) instances");
  theory_cmd->add_option("--max-md", theory.battery.max_md, "Upper bound on m*d")->check(CLI::Range(4, 64));
  theory_cmd->add_option("--seed", theory.battery.seed, "Battery seed");
  theory_cmd->add_option_function<std::string>("--dump", [&](const std::string& v) { theory.dump_dir = v; },
                                               "Write matrices as CSV into this directory");
  theory_cmd->add_option_function<std::string>("--fixture", [&](const std::string& v) { theory.fixture = v; },
                                               "Validate a CSV matrix as an averaging matrix instead");
  theory_cmd->add_option("--fixture-clients", theory.fixture_clients, "Client count m for --fixture");

  auto* stats_cmd = app.add_subcommand("partition-stats", "Per-client shard sizes, weights and label entropy");
  stats_cmd->add_option("--config", configs, "Experiment JSON")->required()->expected(1);
  add_common(stats_cmd, overrides, rule);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? fedlama::kExitOk : fedlama::kExitConfig;
  }
  if (!rule.empty()) overrides.rule = fedlama::parse_rule(rule);

  if (*theory_cmd) return fedlama::cmd_theory_check(theory, std::cout);

  std::vector<fedlama::ExperimentConfig> loaded;
  for (const auto& path : configs) {
    auto e = load_or_report(path, overrides);
    if (!e) return fedlama::kExitConfig;
    loaded.push_back(std::move(*e));
  }

  if (*run_cmd) return fedlama::cmd_run(loaded.front(), std::cout);
  if (*sweep_cmd) return fedlama::cmd_sweep(loaded.front(), axis, values, std::cout);
  if (*stats_cmd) return fedlama::cmd_partition_stats(loaded.front(), std::cout);
  if (*compare_cmd) {
    if (loaded.size() == 2) return fedlama::cmd_compare(loaded[0], loaded[1], std::cout);
    const auto& e = loaded.front();
    if (e.baselines.empty()) {
      std::cerr << "compare needs two configs, or one config with a baselines list\n";
      return fedlama::kExitConfig;
    }
    int status = fedlama::kExitOk;
    for (const auto& b : e.baselines) {
      fedlama::ExperimentConfig base = e;
      base.run = b;
      status = std::max(status, fedlama::cmd_compare(base, e, std::cout));
    }
    return status;
  }
  return fedlama::kExitConfig;
}
