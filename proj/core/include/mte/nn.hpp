// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fully connected ReLU classifiers, SGD with momentum, and step learning-rate
// schedules. Parameters live in one flat array per model, laid out layer by
// layer as [W_0 (in x out, row-major), b_0 (out), W_1, b_1, ...].

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mte/autodiff.hpp"
#include "mte/matrix.hpp"

namespace mte::nn {

struct ModelSpec {
  /// Input dim, hidden widths..., class count K. At least two entries.
  std::vector<std::size_t> widths;
  std::uint64_t init_seed = 0;

  void validate() const;
  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_classes() const { return widths.back(); }
  std::size_t num_layers() const { return widths.size() - 1; }
  std::size_t param_count() const;
  std::size_t weight_offset(std::size_t layer) const;
  std::size_t bias_offset(std::size_t layer) const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainMeta {
  std::string config_digest;
  std::size_t epoch = 0;

  friend bool operator==(const TrainMeta&, const TrainMeta&) = default;
};

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelCheckpoint {
  ModelSpec spec;
  std::vector<double> params;
  int format_version = kCheckpointFormatVersion;
  TrainMeta meta;

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

/// Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero. Deterministic in spec.init_seed.
ModelCheckpoint init_params(const ModelSpec& spec);

/// Plain (tape-free) evaluation; bit-identical to the tape path.
Matrix forward_logits(const ModelCheckpoint& ckpt, const Matrix& batch);

/// Number of forward_logits calls made on the current thread.
std::uint64_t forward_pass_count();
void reset_forward_pass_count();

/// A model's parameters recorded on a tape, one node per weight matrix and bias row.
struct TapeModel {
  std::vector<ad::NodeId> weights;
  std::vector<ad::NodeId> biases;
};

TapeModel bind_parameters(ad::Tape& tape, const ModelCheckpoint& ckpt);
/// Records the network on `tape` and returns the logits node.
ad::NodeId build_logits(ad::Tape& tape, const TapeModel& model, ad::NodeId input);
/// Packs per-node gradients back into the flat parameter layout.
std::vector<double> flatten_gradients(const ad::Gradients& grads, const TapeModel& model,
                                      const ModelSpec& spec);

struct OptState {
  std::vector<double> velocity;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

OptState make_opt_state(const ModelCheckpoint& ckpt, double lr, double momentum, double weight_decay);

/// v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v.
/// Rejects non-finite gradients with the first offending index.
void sgd_step(ModelCheckpoint& ckpt, std::span<const double> grads, OptState& opt);

/// Initial rate for `warm_epochs`, then multiplied by `decay_factor` at epoch
/// warm_epochs and every `decay_interval` epochs after it.
struct LrSchedule {
  double initial = 0.1;
  std::size_t warm_epochs = 0;
  std::size_t decay_interval = 1;
  double decay_factor = 1.0;

  static LrSchedule constant(double lr) { return {lr, 0, 1, 1.0}; }
  void validate() const;
};

double lr_at_epoch(const LrSchedule& schedule, std::size_t epoch);

std::string checkpoint_to_json(const ModelCheckpoint& ckpt);
ModelCheckpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mte::nn
