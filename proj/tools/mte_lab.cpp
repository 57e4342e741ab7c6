// SPDX-License-Identifier: Apache-2.0
// mte-lab: run, compare, validate and sweep calibration experiments.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mte/error.hpp"
#include "mte/experiment.hpp"
#include "mte/io.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

fs::path default_out(const mte::exp::ExperimentConfig& cfg, const fs::path& config_path) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return fs::path("runs") / config_path.stem();
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const mte::exp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const mte::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration experiments with mutual-transport ensembles"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Train and evaluate every method in a config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out_dir, "Output directory (default: config output_dir or runs/<config name>)");

  std::vector<std::string> reports;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Merge run reports into one comparison table");
  compare->add_option("reports", reports, "report.json files")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Output CSV")->required();

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", validate_path, "Experiment config (JSON)")->required();

  std::string sweep_config;
  std::vector<std::uint64_t> sweep_seeds{0, 1, 2, 3, 4};
  std::string sweep_out;
  auto* sweep = app.add_subcommand("sweep", "Run a config over several seeds and summarise medians");
  sweep->add_option("config", sweep_config, "Experiment config (JSON)")->required();
  sweep->add_option("--seeds", sweep_seeds, "Seeds to run")->delimiter(',');
  sweep->add_option("--out", sweep_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*run) {
    return guarded([&] {
      mte::exp::ExperimentConfig cfg = mte::exp::load_config(config_path);
      if (*seed_opt) cfg.seed = seed;
      const fs::path out = out_dir.empty() ? default_out(cfg, config_path) : fs::path(out_dir);
      mte::exp::run_experiment(cfg, out);
      std::cout << "wrote " << (out / "report.json").string() << "\n";
      return kOk;
    });
  }
  if (*compare) {
    return guarded([&] {
      std::vector<fs::path> paths(reports.begin(), reports.end());
      const std::string csv = mte::exp::compare_reports(paths);
      mte::write_file_atomic(compare_out, csv);
      std::cout << "wrote " << compare_out << "\n";
      return kOk;
    });
  }
  if (*validate) {
    const auto errors = mte::exp::validate_config(validate_path);
    if (errors.empty()) {
      std::cout << "ok\n";
      return kOk;
    }
    for (const auto& e : errors) std::cerr << "error: " << e << "\n";
    return kUsage;
  }
  if (*sweep) {
    return guarded([&] {
      const mte::exp::ExperimentConfig cfg = mte::exp::load_config(sweep_config);
      const fs::path out = sweep_out.empty() ? default_out(cfg, sweep_config) / "sweep" : fs::path(sweep_out);
      std::cout << mte::exp::sweep_seeds(cfg, sweep_seeds, out);
      return kOk;
    });
  }
  return kUsage;
}
