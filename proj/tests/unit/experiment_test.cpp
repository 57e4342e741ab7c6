// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <json.hpp>
#include <sys/wait.h>

#include "mte/experiment.hpp"
#include "mte/io.hpp"
#include "test_util.hpp"

namespace mte::exp {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path kFixtures = MTE_FIXTURE_DIR;
const fs::path kConfigs = MTE_CONFIG_DIR;

int lab(const std::string& args) {
  const std::string cmd = std::string(MTE_LAB_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string joined(const std::vector<std::string>& errors) {
  std::string s;
  for (const auto& e : errors) s += e + "\n";
  return s;
}

TEST(ValidateConfig, FixturesAndBundledConfigsAreValid) {
  for (const char* f : {"tiny.json", "tiny_ce.json"}) EXPECT_EQ(joined(validate_config(kFixtures / f)), "") << f;
  for (const auto& entry : fs::directory_iterator(kConfigs)) {
    if (entry.path().filename() == "schema.json") continue;
    EXPECT_EQ(joined(validate_config(entry.path())), "") << entry.path();
  }
}

TEST(ValidateConfig, NegativeAlphaNamesFieldAndConstraint) {
  const auto errors = validate_config(kFixtures / "bad_alpha.json");
  ASSERT_EQ(errors.size(), 1u) << joined(errors);
  EXPECT_NE(errors[0].find("alpha"), std::string::npos) << errors[0];
  EXPECT_NE(errors[0].find(">= 0"), std::string::npos) << errors[0];
}

TEST(ValidateConfig, UnknownKeySuggestsNearest) {
  const auto errors = validate_config(kFixtures / "typo_key.json");
  ASSERT_EQ(errors.size(), 1u) << joined(errors);
  EXPECT_NE(errors[0].find("did you mean 'alpha'"), std::string::npos) << errors[0];
}

TEST(ValidateConfig, CollectsEveryProblem) {
  const auto dir = testing::temp_dir("validate");
  write_file_atomic(dir / "c.json",
                    R"({"sed": 1, "methods": [{"method": "mte", "alpha": -2, "epochs": -1}],)"
                    R"( "eval": {"bins": 0, "detection": ["far"]}})");
  const auto errors = validate_config(dir / "c.json");
  EXPECT_GE(errors.size(), 4u) << joined(errors);
  EXPECT_NE(joined(errors).find("did you mean 'seed'"), std::string::npos) << joined(errors);
  EXPECT_FALSE(validate_config(dir / "missing.json").empty());
  write_file_atomic(dir / "bad.json", "{not json");
  EXPECT_FALSE(validate_config(dir / "bad.json").empty());
  EXPECT_THROW(load_config(dir / "c.json"), ConfigError);
}

TEST(ValidateConfig, SplitMustSumToOne) {
  EXPECT_THROW(parse_config(R"({"dataset": {"split": {"train": 0.5, "val": 0.1, "test": 0.1}},
                                "methods": [{"name": "ce", "method": "ce"}]})"),
               ConfigError);
}

TEST(RunExperiment, ReportIsByteIdenticalAcrossRuns) {
  const ExperimentConfig cfg = load_config(kFixtures / "tiny.json");
  const auto a = testing::temp_dir("det_a"), b = testing::temp_dir("det_b");
  run_experiment(cfg, a);
  run_experiment(cfg, b);
  EXPECT_EQ(read_file(a / "report.json"), read_file(b / "report.json"));
  EXPECT_EQ(read_file(a / "checkpoints/mte-1/primary.json"), read_file(b / "checkpoints/mte-1/primary.json"));
}

TEST(RunExperiment, MatchesFrozenReport) {
  const std::string report = run_report(load_config(kFixtures / "tiny.json"));
  EXPECT_EQ(report, read_file(kFixtures / "tiny_report.json"));
}

TEST(RunExperiment, TablesAreDerivedFromReport) {
  const auto dir = testing::temp_dir("tables");
  const std::string report = run_experiment(load_config(kFixtures / "tiny.json"), dir);
  const auto tables = report_tables(report);
  std::vector<std::string> names;
  for (const auto& [name, content] : tables) {
    names.push_back(name);
    EXPECT_EQ(read_file(dir / name), content) << name;
  }
  for (const char* want : {"metrics.csv", "reliability.csv", "confidence_hist.csv", "detection.csv",
                           "corruption_sweep.csv", "alpha_sweep.csv", "history.csv"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  }
  // Sections absent from the config produce no table.
  const auto lean = report_tables(run_report(load_config(kFixtures / "tiny_ce.json")));
  for (const auto& [name, content] : lean) {
    EXPECT_NE(name, "corruption_sweep.csv");
    EXPECT_NE(name, "alpha_sweep.csv");
  }
}

TEST(RunExperiment, ReportContents) {
  const json r = json::parse(run_report(load_config(kFixtures / "tiny.json")));
  EXPECT_EQ(r.at("format"), "mte-report");
  EXPECT_EQ(r.at("seed"), "3");
  EXPECT_EQ(r.at("dataset").at("n_train"), 108);
  ASSERT_EQ(r.at("methods").size(), 2u);
  const json& mte = r.at("methods").at(1);
  EXPECT_EQ(mte.at("models_evaluated"), 1);
  EXPECT_EQ(mte.at("checkpoints"), json({"primary", "aux0"}));
  EXPECT_EQ(mte.at("corruption").size(), 4u);
  EXPECT_EQ(mte.at("alpha_sweep").size(), 2u);
  EXPECT_EQ(mte.at("detection").size(), 3u);
  EXPECT_EQ(mte.at("history").size(), 3u);
  for (const json& m : r.at("methods")) {
    for (const char* k : {"accuracy", "ece", "cw_ece"}) {
      const double v = m.at(k);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Cli, SeedFlagOverridesConfig) {
  const auto dir = testing::temp_dir("cli_seed");
  ASSERT_EQ(lab("run " + (kFixtures / "tiny_ce.json").string() + " --seed 11 --out " + dir.string()), 0);
  const json r = json::parse(read_file(dir / "report.json"));
  EXPECT_EQ(r.at("seed"), "11");
}

TEST(Cli, MissingConfigFailsWithoutOutput) {
  const auto parent = testing::temp_dir("cli_missing");
  const fs::path out = parent / "out";
  EXPECT_EQ(lab("run " + (parent / "nope.json").string() + " --out " + out.string()), 1);
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(lab("validate " + (kFixtures / "bad_alpha.json").string()), 1);
  EXPECT_EQ(lab("validate " + (kFixtures / "tiny.json").string()), 0);
  EXPECT_EQ(lab("frobnicate"), 1);
}

TEST(Cli, DivergenceIsARuntimeFailure) {
  const auto parent = testing::temp_dir("cli_diverge");
  EXPECT_EQ(lab("run " + (kFixtures / "diverge.json").string() + " --out " + (parent / "out").string()), 2);
  EXPECT_FALSE(fs::exists(parent / "out" / "report.json"));
}

TEST(Compare, SelfComparisonAndDigestMismatch) {
  const auto dir = testing::temp_dir("compare");
  const ExperimentConfig cfg = load_config(kFixtures / "tiny_ce.json");
  run_experiment(cfg, dir / "a");
  const std::string csv = compare_reports({dir / "a" / "report.json", dir / "a" / "report.json"});
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t nl; (nl = csv.find('\n', start)) != std::string::npos; start = nl + 1) {
    lines.push_back(csv.substr(start, nl - start));
  }
  ASSERT_EQ(lines.size(), 3u) << csv;
  EXPECT_EQ(lines[1], lines[2]);
  EXPECT_NE(lines[0].find("ece"), std::string::npos);

  ExperimentConfig other = cfg;
  other.seed = 4;
  run_experiment(other, dir / "b");
  EXPECT_THROW(compare_reports({dir / "a" / "report.json", dir / "b" / "report.json"}), InvalidArgument);
  EXPECT_THROW(compare_reports({dir / "a" / "report.json"}), InvalidArgument);

  EXPECT_EQ(lab("compare " + (dir / "a" / "report.json").string() + " " + (dir / "a" / "report.json").string() +
                " --out " + (dir / "cmp.csv").string()),
            0);
  EXPECT_EQ(read_file(dir / "cmp.csv"), csv);
}

TEST(Sweep, PerSeedRowsAndMedians) {
  const auto dir = testing::temp_dir("sweep");
  const std::string csv = sweep_seeds(load_config(kFixtures / "tiny_ce.json"), {0, 1, 2}, dir);
  EXPECT_TRUE(fs::exists(dir / "seed-1" / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
  EXPECT_NE(csv.find("median"), std::string::npos) << csv;
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5) << csv;
}

TEST(SelectAlpha, LowestEceWithinAccuracySlack) {
  const std::vector<AlphaPoint> pts{{0.4, 0.90, 0.05}, {0.8, 0.897, 0.02}, {1.2, 0.85, 0.01}};
  EXPECT_EQ(select_alpha(pts, 0.005), 0.8);
  EXPECT_EQ(select_alpha(pts, 0.0), 0.4);
  EXPECT_EQ(select_alpha(pts, 1.0), 1.2);
  EXPECT_THROW(select_alpha({}, 0.005), InvalidArgument);
}

TEST(EditDistance, Basics) {
  EXPECT_EQ(edit_distance("alpa", "alpha"), 1u);
  EXPECT_EQ(edit_distance("", "abc"), 3u);
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3u);
}

TEST(BundledConfig, ReportsBothMethods) {
  ExperimentConfig cfg = load_config(kConfigs / "mte_vs_ce.json");
  const json r = json::parse(run_report(cfg));
  ASSERT_EQ(r.at("methods").size(), 2u);
  EXPECT_EQ(r.at("methods").at(0).at("name"), "ce");
  EXPECT_EQ(r.at("methods").at(1).at("name"), "mte-1");
  const auto tables = report_tables(r.dump());
  const std::string& metrics = tables.front().second;
  EXPECT_EQ(tables.front().first, "metrics.csv");
  EXPECT_EQ(metrics, read_file(kFixtures / "mte_vs_ce_metrics.csv"));
}

}  // namespace
}  // namespace mte::exp
