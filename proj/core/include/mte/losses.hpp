// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training objectives recorded on an autodiff tape. Every loss is the batch
// mean of a per-sample loss. Probability inputs that feed a log are clamped
// at ad::kLogFloor. The MTE and DML losses take their soft targets as
// gradient-opaque nodes (detached or constant) and reject anything else.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mte/autodiff.hpp"
#include "mte/matrix.hpp"

namespace mte::loss {

/// Row-stochastic predictions with per-row confidence (max) and predicted class (argmax).
struct ProbBatch {
  Matrix probs;
  std::vector<double> confidence;
  std::vector<std::size_t> predicted;

  /// Validates rows sum to 1 within 1e-9 and entries lie in [0, 1].
  static ProbBatch from_probs(Matrix probs);
  /// exp of the row-wise log-softmax.
  static ProbBatch from_logits(const Matrix& logits);

  std::size_t size() const { return probs.rows(); }
  std::size_t num_classes() const { return probs.cols(); }
};

struct LabelBatch {
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  /// Throws InvalidArgument when any label is >= num_classes.
  void validate() const;
  Matrix one_hot() const;
  std::size_t size() const { return labels.size(); }
};

struct LossTerm {
  std::string name;
  ad::NodeId node;
};

/// Scalar objective plus its named additive components (before weighting).
struct LossParts {
  ad::NodeId total;
  std::vector<LossTerm> terms;

  bool has_term(std::string_view name) const;
};

ad::NodeId cross_entropy(ad::Tape& tape, ad::NodeId logp, const LabelBatch& labels);

/// mean_b sum_k p (log p - log q); p given as probabilities, q as log-probabilities.
ad::NodeId kl_divergence(ad::Tape& tape, ad::NodeId p, ad::NodeId logq);

/// CE(f) + alpha * mean_i KL(g_i || f). Auxiliary probabilities must be gradient-opaque.
LossParts mte_primary_loss(ad::Tape& tape, ad::NodeId f_logp, std::span<const ad::NodeId> aux_probs,
                           const LabelBatch& labels, double alpha);

/// KL(f || g). The primary's probabilities must be gradient-opaque; there is no CE term.
LossParts mte_auxiliary_loss(ad::Tape& tape, ad::NodeId f_prob, ad::NodeId g_logp);

/// CE(own) + alpha * KL(peer || own), the mutual-learning objective used by both peers.
LossParts dml_loss(ad::Tape& tape, ad::NodeId own_logp, ad::NodeId peer_prob, const LabelBatch& labels,
                   double alpha);

/// Convex combination of member predictions. Weights must be >= 0 and sum to 1 within 1e-9.
ProbBatch ensemble_probs(std::span<const ProbBatch> members, std::span<const double> weights);

/// Tape version of ensemble_probs (no validation of row sums).
ad::NodeId mix_probs(ad::Tape& tape, std::span<const ad::NodeId> probs, std::span<const double> weights);

/// Uniform weights of length n.
std::vector<double> uniform_weights(std::size_t n);

enum class BaselineKind { kCrossEntropy, kFocal, kLabelSmoothing, kEntropyReg };

struct BaselineLossSpec {
  BaselineKind kind = BaselineKind::kCrossEntropy;
  /// gamma for focal, epsilon for label smoothing, weight for entropy regularization.
  double param = 0.0;

  void validate() const;
};

std::string baseline_kind_name(BaselineKind kind);
BaselineKind parse_baseline_kind(std::string_view name);

/// focal: mean -(1 - p_y)^gamma log p_y
/// label-smoothing: CE against (1 - eps) one-hot + eps / K
/// entropy-reg: CE - weight * H(p)
LossParts baseline_loss(ad::Tape& tape, const BaselineLossSpec& spec, ad::NodeId logp, const LabelBatch& labels);

}  // namespace mte::loss
