// SPDX-License-Identifier: Apache-2.0
#pragma once

// Config-driven experiment pipeline behind the mte-lab tool: load and validate
// a JSON config, train every configured method on one dataset, evaluate
// calibration, detection, corruption and alpha sweeps, and write report.json
// plus CSV tables that are derived from it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mte/data.hpp"
#include "mte/error.hpp"
#include "mte/trainer.hpp"

namespace mte::exp {

/// A config that failed validation; what() joins every field-level message.
class ConfigError : public InvalidArgument {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

struct DatasetConfig {
  std::string source = "mixture";  // "mixture" or "csv"
  data::MixtureSpec mixture = data::MixtureSpec::default_spec(0);
  std::filesystem::path csv_path;
  data::SplitFractions split{6.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0};
};

struct MethodConfig {
  std::string name;
  train::TrainConfig train;
};

struct CorruptionSweep {
  std::vector<data::CorruptionKind> kinds;
  std::vector<int> severities{1, 2, 3, 4, 5};
};

struct EvalConfig {
  std::size_t bins = metrics::kDefaultBins;
  /// Any of "misclassification", "near-ood", "far-ood".
  std::vector<std::string> detection{"misclassification", "near-ood", "far-ood"};
  std::optional<CorruptionSweep> corruption;
  std::vector<double> alpha_sweep;
  /// Validation accuracy slack (absolute) when choosing alpha by validation ECE.
  double alpha_acc_tolerance = 0.005;
  bool save_checkpoints = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  DatasetConfig dataset;
  std::vector<MethodConfig> methods;
  EvalConfig eval;

  /// Canonical JSON of everything except seed and output directory.
  std::string canonical_json() const;
  std::string digest() const;
};

/// Parses and validates; relative csv paths resolve against `base_dir`.
/// Throws ConfigError listing every problem found.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every problem in the config, or an empty list. Never throws for bad content.
std::vector<std::string> validate_config(const std::filesystem::path& path);

/// Runs the pipeline and returns report.json content. No files are touched.
std::string run_report(const ExperimentConfig& cfg);

/// Runs the pipeline and writes report.json, the derived CSV tables and (if
/// configured) checkpoints under `out_dir`. Every file is written atomically.
std::string run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

/// CSV tables re-derived from a report: file name -> content. Sections that
/// the report does not contain produce no table.
std::vector<std::pair<std::string, std::string>> report_tables(const std::string& report_json);

/// One row per (report, method). Rejects reports whose dataset digests differ.
std::string compare_reports(const std::vector<std::filesystem::path>& reports);

/// Runs `cfg` once per seed into out_dir/seed-<s> and returns a summary CSV
/// with per-seed rows and per-method medians.
std::string sweep_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const std::filesystem::path& out_dir);

/// Levenshtein distance, used for "did you mean" hints.
std::size_t edit_distance(std::string_view a, std::string_view b);

/// Alpha minimising validation ECE among sweep points whose validation
/// accuracy is within `acc_tolerance` of the best.
struct AlphaPoint {
  double alpha = 0.0;
  double val_accuracy = 0.0;
  double val_ece = 0.0;
};
double select_alpha(const std::vector<AlphaPoint>& points, double acc_tolerance);

}  // namespace mte::exp
