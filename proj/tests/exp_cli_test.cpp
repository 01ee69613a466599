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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fedlama/artifacts.hpp"
#include "fedlama/exp_cli.hpp"
#include "support/oracles.hpp"

namespace fedlama {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(FEDLAMA_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json minimal_config() {
  return nlohmann::json::parse(R"({
    "repeats": 1,
    "run": {
      "clients": 4, "iterations": 24, "tau_base": 2, "phi": 2, "lr": 0.05, "batch_size": 4,
      "seed": 5, "eval_every": 8,
      "model": {"widths": [3, 8, 6, 2], "hidden_activation": "relu"},
      "data": {"num_classes": 2, "samples_per_class": 30, "feature_dim": 3}
    }
  })");
}

fs::path write_config(const fs::path& dir, const std::string& name, const nlohmann::json& j) {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(FEDLAMA_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

TEST(CmdRun, SmokeArtifactsExistAndParse) {
  const auto dir = scratch("smoke");
  const auto cfg = write_config(dir, "c.json", minimal_config());
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "out").string(), dir / "log.txt"), 0);
  const auto seed_dir = dir / "out" / "seed-5";
  const auto metrics = testing::read_csv((seed_dir / "metrics.csv").string());
  EXPECT_EQ(metrics.header,
            (std::vector<std::string>{"iteration", "loss", "accuracy", "discrepancy", "grad_norm_sq", "comm_cost_so_far"}));
  EXPECT_EQ(metrics.rows.front()[0], "0");
  EXPECT_EQ(metrics.rows.back()[0], "24");
  const auto ledger = testing::read_csv((seed_dir / "ledger.csv").string());
  EXPECT_EQ(ledger.rows.size(), 3u);
  const auto curves = testing::read_csv((seed_dir / "curves.csv").string());
  EXPECT_EQ(curves.rows.size(), 6u * 3u);

  std::ifstream events(seed_dir / "events.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(events, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("type"));
    ++n;
  }
  EXPECT_GT(n, 0u);

  std::ifstream model(seed_dir / "model.bin", std::ios::binary);
  const MlpModel m = read_model_binary(model);
  EXPECT_EQ(m.param_dims(), (std::vector<std::size_t>{32, 54, 14}));

  const auto manifest = nlohmann::json::parse(testing::slurp((dir / "out" / "manifest.json").string()));
  EXPECT_EQ(manifest["runs"][0]["status"], "ok");
  EXPECT_EQ(manifest["seeds"], nlohmann::json::array({5}));
}

TEST(CmdRun, SameConfigTwiceIsByteIdentical) {
  const auto dir = scratch("twice");
  const auto cfg = write_config(dir, "c.json", minimal_config());
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "a").string(), dir / "a.txt"), 0);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "b").string(), dir / "b.txt"), 0);
  for (const char* f : {"metrics.csv", "events.jsonl", "ledger.csv", "curves.csv", "model.bin"})
    EXPECT_EQ(testing::slurp((dir / "a" / "seed-5" / f).string()), testing::slurp((dir / "b" / "seed-5" / f).string()))
        << f;
}

TEST(CmdRun, ManifestAloneReproducesArtifacts) {
  const auto dir = scratch("manifest");
  auto j = minimal_config();
  j["repeats"] = 2;
  j["run"]["data"]["partition"] = "dirichlet";
  j["run"]["data"]["alpha"] = 0.5;
  const auto cfg = write_config(dir, "c.json", j);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "a").string(), dir / "a.txt"), 0);
  ASSERT_EQ(cli("run --config " + (dir / "a" / "manifest.json").string() + " --out " + (dir / "b").string(),
                dir / "b.txt"),
            0);
  for (const char* s : {"seed-5", "seed-6"})
    for (const char* f : {"metrics.csv", "events.jsonl", "ledger.csv", "curves.csv", "model.bin"})
      EXPECT_EQ(testing::slurp((dir / "a" / s / f).string()), testing::slurp((dir / "b" / s / f).string())) << s << f;
}

TEST(CmdRun, RoundingWarningInManifest) {
  const auto dir = scratch("rounding");
  auto j = minimal_config();
  j["run"]["iterations"] = 25;
  const auto cfg = write_config(dir, "c.json", j);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "out").string(), dir / "log.txt"), 0);
  const auto manifest = nlohmann::json::parse(testing::slurp((dir / "out" / "manifest.json").string()));
  const auto& r = manifest["runs"][0];
  EXPECT_EQ(r["iterations_requested"], 25);
  EXPECT_EQ(r["iterations_effective"], 28);
  ASSERT_EQ(r["warnings"].size(), 1u);
  EXPECT_NE(r["warnings"][0].get<std::string>().find("28"), std::string::npos);
}

TEST(CmdRun, BadConfigExitsWithFieldMessage) {
  const auto dir = scratch("badcfg");
  auto j = minimal_config();
  j["run"]["lr"] = -0.1;
  const auto cfg = write_config(dir, "c.json", j);
  EXPECT_EQ(cli("run --config " + cfg.string(), dir / "log.txt"), kExitConfig);
  EXPECT_NE(testing::slurp((dir / "log.txt").string()).find("$.run.lr"), std::string::npos);

  j = minimal_config();
  j["run"]["typo_field"] = 1;
  const auto cfg2 = write_config(dir, "c2.json", j);
  EXPECT_EQ(cli("run --config " + cfg2.string(), dir / "log2.txt"), kExitConfig);
  EXPECT_NE(testing::slurp((dir / "log2.txt").string()).find("typo_field"), std::string::npos);
  EXPECT_EQ(cli("run --config " + (dir / "missing.json").string(), dir / "log3.txt"), kExitConfig);
  EXPECT_EQ(cli("frobnicate", dir / "log4.txt"), kExitConfig);
}

TEST(CmdRun, DivergenceExitsWithRuntimeCodeAndKeepsArtifacts) {
  const auto dir = scratch("abort");
  auto j = minimal_config();
  j["run"]["lr"] = 1e6;
  j["run"]["iterations"] = 400;
  j["run"]["model"]["hidden_activation"] = "identity";
  const auto cfg = write_config(dir, "c.json", j);
  EXPECT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "out").string(), dir / "log.txt"), kExitRuntime);
  EXPECT_TRUE(fs::exists(dir / "out" / "seed-5" / "events.jsonl"));
  const auto manifest = nlohmann::json::parse(testing::slurp((dir / "out" / "manifest.json").string()));
  EXPECT_EQ(manifest["runs"][0]["status"], "aborted");
}

RunConfig compare_base() {
  RunConfig c = parse_experiment(minimal_config()).run;
  c.iterations = 48;
  c.phi = 1;
  c.tau_base = 2;
  return c;
}

TEST(CompareRuns, AgainstItself) {
  const auto c = compare_base();
  const auto res = compare_runs(c, c, 2, 1);
  EXPECT_EQ(res.delta_accuracy(), 0.0);
  EXPECT_EQ(res.candidate.mean_rel_cost(), 100.0);
  const auto table = format_comparison(res);
  EXPECT_NE(table.find("Validation acc."), std::string::npos);
  EXPECT_NE(table.find("100.00%"), std::string::npos);
}

TEST(CompareRuns, DoubledIntervalHalvesCost) {
  const auto a = compare_base();
  auto b = a;
  b.tau_base = 4;
  EXPECT_EQ(compare_runs(a, b, 2, 1).candidate.mean_rel_cost(), 50.0);
}

TEST(CompareRuns, AdaptiveCostLiesBetween) {
  RunConfig a = compare_base();
  a.clients = 8;
  a.iterations = 96;
  a.model = ModelSpec::with_hidden({3, 32, 32, 32, 2}, Activation::kRelu);
  a.data.partition = PartitionMode::kDirichlet;
  a.data.alpha = 0.3;
  RunConfig b = a;
  b.phi = 2;
  const auto res = compare_runs(a, b, 2, 1);
  for (double r : res.candidate.rel_cost) {
    EXPECT_GT(r, 50.0);
    EXPECT_LT(r, 100.0);
  }
}

TEST(CompareRuns, RefusesMismatchedSettings) {
  const auto a = compare_base();
  auto b = a;
  b.model = ModelSpec::with_hidden({3, 9, 6, 2}, Activation::kRelu);
  EXPECT_THROW(compare_runs(a, b, 1, 1), ConfigError);
  std::ostringstream out;
  ExperimentConfig ea, eb;
  ea.run = a;
  eb.run = b;
  EXPECT_EQ(cmd_compare(ea, eb, out, 1), kExitConfig);
  EXPECT_NE(out.str().find("refusing"), std::string::npos);
}

TEST(CmdCompare, CliWithTwoConfigs) {
  const auto dir = scratch("compare");
  auto j = minimal_config();
  j["run"]["phi"] = 1;
  const auto a = write_config(dir, "a.json", j);
  j["run"]["tau_base"] = 4;
  const auto b = write_config(dir, "b.json", j);
  ASSERT_EQ(cli("compare --config " + a.string() + " --config " + b.string() + " --repeats 2", dir / "log.txt"), 0);
  EXPECT_NE(testing::slurp((dir / "log.txt").string()).find("50.00%"), std::string::npos);
}

std::vector<SweepRow> run_sweep(const nlohmann::json& j, SweepAxis axis, std::vector<double> values) {
  return sweep(parse_experiment(j), axis, values, 1);
}

TEST(Sweep, PhiValues) {
  auto j = minimal_config();
  j["repeats"] = 2;
  j["run"]["iterations"] = 48;
  const auto rows = run_sweep(j, SweepAxis::kPhi, {1, 2, 4});
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    if (r.axis_value == 1.0) {
      EXPECT_EQ(r.rel_cost, 100.0);
    }
    EXPECT_GE(r.rel_cost, 100.0 / r.axis_value - 1e-9);
    EXPECT_LE(r.rel_cost, 100.0);
  }
}

TEST(Sweep, AlphaEntropyNonDecreasing) {
  auto j = minimal_config();
  j["repeats"] = 10;
  j["run"]["iterations"] = 4;
  j["run"]["clients"] = 10;
  j["run"]["model"]["widths"] = {3, 4, 4, 5};
  j["run"]["data"]["num_classes"] = 5;
  j["run"]["data"]["samples_per_class"] = 60;
  const auto rows = run_sweep(j, SweepAxis::kAlpha, {0.1, 0.5, 10});
  std::vector<double> mean(3, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) mean[i / 10] += rows[i].label_entropy / 10.0;
  EXPECT_LE(mean[0], mean[1]);
  EXPECT_LE(mean[1], mean[2]);
}

TEST(Sweep, TauBaseUnderFedAvg) {
  auto j = minimal_config();
  j["run"]["phi"] = 1;
  j["run"]["tau_base"] = 6;
  j["run"]["iterations"] = 48;
  const auto rows = run_sweep(j, SweepAxis::kTauBase, {6, 12, 24});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].rel_cost, 100.0);
  EXPECT_EQ(rows[1].rel_cost, 50.0);
  EXPECT_EQ(rows[2].rel_cost, 25.0);
}

TEST(Sweep, CliWritesLongFormCsv) {
  const auto dir = scratch("sweep");
  const auto cfg = write_config(dir, "c.json", minimal_config());
  ASSERT_EQ(cli("sweep --config " + cfg.string() + " --axis phi --values 1,2 --repeats 2 --out " + dir.string(),
                dir / "log.txt"),
            0);
  const auto csv = testing::read_csv((dir / "sweep_phi.csv").string());
  EXPECT_EQ(csv.header, (std::vector<std::string>{"axis", "axis_value", "seed", "final_acc", "rel_cost",
                                                  "mean_discrepancy", "label_entropy"}));
  EXPECT_EQ(csv.rows.size(), 4u);
  EXPECT_EQ(csv.rows[0][4], "100.00");
  EXPECT_EQ(cli("sweep --config " + cfg.string() + " --axis phi --values 0.5", dir / "bad.txt"), kExitConfig);
  EXPECT_EQ(cli("sweep --config " + cfg.string() + " --axis colour --values 1", dir / "bad2.txt"), kExitConfig);
}

TEST(TheoryCheck, DefaultBatteryPasses) {
  const auto dir = scratch("theory");
  EXPECT_EQ(cli("theory-check", dir / "log.txt"), 0);
  EXPECT_EQ(cli("theory-check --instances 100 --max-md 32", dir / "log2.txt"), 0);
  const auto log = testing::slurp((dir / "log2.txt").string());
  EXPECT_NE(log.find("instances: 100"), std::string::npos);
  EXPECT_NE(log.find("max dev"), std::string::npos);
  EXPECT_EQ(log.find("FAIL"), std::string::npos);
}

TEST(TheoryCheck, DumpedMatricesValidateAndAsymmetricFixtureFails) {
  const auto dir = scratch("fixture");
  ASSERT_EQ(cli("theory-check --instances 3 --dump " + (dir / "dump").string(), dir / "log.txt"), 0);
  const auto product = dir / "dump" / "instance_0_product.csv";
  ASSERT_TRUE(fs::exists(product));
  const Matrix p = read_matrix_csv(product.string());
  // Same options as the CLI defaults, to recover the client count of instance 0.
  BatteryOptions opt;
  opt.instances = 3;
  const std::size_t m = run_theory_battery(opt).instances[0].check.m;
  EXPECT_EQ(cli("theory-check --fixture " + product.string() + " --fixture-clients " + std::to_string(m),
                dir / "ok.txt"),
            0);

  Matrix bad = p;
  bad(0, bad.cols - 1) += 0.125;
  {
    std::ofstream os(dir / "bad.csv");
    write_matrix_csv(os, bad);
  }
  EXPECT_EQ(cli("theory-check --fixture " + (dir / "bad.csv").string() + " --fixture-clients 1", dir / "bad.txt"),
            kExitCheck);
  EXPECT_EQ(cli("theory-check --fixture " + (dir / "bad.csv").string() + " --fixture-clients " + std::to_string(m),
                dir / "bad2.txt"),
            kExitCheck);
}

TEST(PartitionStats, ReportsEveryClient) {
  auto j = minimal_config();
  j["run"]["data"]["partition"] = "dirichlet";
  j["run"]["data"]["alpha"] = 0.2;
  std::ostringstream out;
  EXPECT_EQ(cmd_partition_stats(parse_experiment(j), out), kExitOk);
  std::istringstream in(out.str());
  const auto csv = testing::parse_csv(in);
  EXPECT_EQ(csv.header[0], "client");
  EXPECT_EQ(csv.rows.size(), 4u);
  EXPECT_NE(out.str().find("# mean_label_entropy,"), std::string::npos);
}

TEST(ConfigJson, RoundTripThroughJson) {
  auto j = minimal_config();
  j["run"]["rule"] = "literal";
  j["run"]["schedule"] = "static";
  j["run"]["static_extended"] = {0, 2};
  const auto e = parse_experiment(j);
  const auto again = parse_experiment(to_json(e));
  EXPECT_EQ(to_json(again), to_json(e));
  EXPECT_EQ(again.run.rule, AdjustRule::kLiteral);
  EXPECT_EQ(again.run.static_extended, (std::vector<std::size_t>{0, 2}));
}

TEST(ConfigJson, FieldLevelErrors) {
  auto j = minimal_config();
  j["run"]["model"]["widths"] = {4, 8, 2};
  try {
    parse_experiment(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "$.run.model.widths");
  }
  j = minimal_config();
  j["run"]["clients"] = "four";
  EXPECT_THROW(parse_experiment(j), ConfigError);
}

TEST(Artifacts, ModelBinaryRoundTrip) {
  const MlpModel m = init_model(ModelSpec::with_hidden({5, 7, 3}, Activation::kTanh), 4);
  std::stringstream ss;
  write_model_binary(ss, m);
  EXPECT_EQ(read_model_binary(ss), m);
}

}  // namespace
}  // namespace fedlama
