// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loops: single-model baselines, MTE co-training, mutual learning
// and deep ensembles, plus inference over trained checkpoints.
//
// Seeds: model j of a run is initialised from derive_key(seed, 1 + j) and the
// shared mini-batch order of epoch e comes from derive_key(derive_key(seed, 0), e).
// In an MTE run the primary is model 0 and auxiliary i is model 1 + i.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mte/data.hpp"
#include "mte/losses.hpp"
#include "mte/metrics.hpp"
#include "mte/nn.hpp"

namespace mte::train {

enum class Method { kCe, kBaseline, kMte, kDml, kDe };
std::string method_name(Method m);
Method parse_method(std::string_view name);

enum class UpdateOrder {
  /// Auxiliaries learn from the primary after its update on the same batch.
  kPrimaryFirst,
  /// Every model learns from the predictions taken before any update.
  kSameSnapshot,
};
std::string update_order_name(UpdateOrder order);
UpdateOrder parse_update_order(std::string_view name);

struct TrainConfig {
  Method method = Method::kCe;
  loss::BaselineLossSpec baseline;  // used by Method::kBaseline
  double alpha = 0.8;
  /// Auxiliary count for MTE, member count for DE.
  std::size_t n_aux = 1;
  std::vector<std::size_t> primary_hidden{128, 128};
  std::vector<std::size_t> aux_hidden{64};
  std::size_t epochs = 60;
  std::size_t batch_size = 100;
  nn::LrSchedule primary_schedule{0.1, 30, 10, 0.5};
  nn::LrSchedule aux_schedule = nn::LrSchedule::constant(0.01);
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  UpdateOrder update_order = UpdateOrder::kPrimaryFirst;
  std::size_t ece_bins = metrics::kDefaultBins;
  /// Stamped into every checkpoint's metadata.
  std::string config_digest;

  void validate() const;
  nn::ModelSpec primary_spec(std::size_t input_dim, std::size_t num_classes, std::size_t model_index = 0) const;
  nn::ModelSpec aux_spec(std::size_t input_dim, std::size_t num_classes, std::size_t model_index) const;
};

std::uint64_t model_init_seed(std::uint64_t seed, std::size_t model_index);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  /// Batch-mean loss values keyed "<model>.<term>", e.g. "primary.ce", "aux0.kl".
  std::map<std::string, double> losses;
  double val_accuracy = 0.0;
  double val_ece = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  /// Names of the additive loss terms each model was trained on.
  std::map<std::string, std::vector<std::string>> loss_terms;

  /// epoch, lr, one column per loss key, val_acc, val_ece. Wall time is omitted
  /// so the table is a deterministic function of the run.
  std::string to_csv() const;
};

struct SingleResult {
  nn::ModelCheckpoint model;
  TrainHistory history;
};

struct MteResult {
  nn::ModelCheckpoint primary;
  std::vector<nn::ModelCheckpoint> aux;
  TrainHistory history;
};

struct DmlResult {
  std::vector<nn::ModelCheckpoint> models;  // two peers
  TrainHistory history;
};

struct EnsembleResult {
  std::vector<nn::ModelCheckpoint> members;
  std::vector<TrainHistory> histories;
};

/// Method ce or baseline. `model_index` picks the init stream.
SingleResult train_single(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val,
                          std::size_t model_index = 0);
MteResult train_mte(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val);
DmlResult train_dml(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val);
/// Member j is train_single with seed + j.
EnsembleResult train_deep_ensemble(const TrainConfig& cfg, const data::LabeledDataset& train,
                                   const data::LabeledDataset& val);

struct PredictMode {
  enum class Kind { kPrimaryOnly, kEnsemble } kind = Kind::kPrimaryOnly;
  /// Ensemble weights; empty means uniform.
  std::vector<double> weights;

  static PredictMode primary_only() { return {}; }
  static PredictMode ensemble(std::vector<double> w = {}) { return {Kind::kEnsemble, std::move(w)}; }
};

/// primary-only evaluates ckpts[0] alone; ensemble mixes every checkpoint's softmax.
loss::ProbBatch predict(std::span<const nn::ModelCheckpoint> ckpts, const Matrix& batch, const PredictMode& mode);

}  // namespace mte::train
