// SPDX-License-Identifier: Apache-2.0
#include "mte/losses.hpp"

#include <algorithm>
#include <cmath>

#include "mte/error.hpp"

namespace mte::loss {

namespace {

constexpr double kRowSumTolerance = 1e-9;

void require_opaque(const ad::Tape& tape, ad::NodeId id, const char* what) {
  if (tape.requires_grad(id)) {
    throw InvalidArgument(std::string(what) + " (node " + std::to_string(id) +
                          ") must be detached from the gradient graph");
  }
}

void require_log_probs(const Matrix& logp) {
  for (std::size_t r = 0; r < logp.rows(); ++r) {
    double s = 0.0;
    for (double v : logp.row_span(r)) s += std::exp(v);
    if (std::abs(s - 1.0) > kRowSumTolerance) {
      throw InvalidArgument("row " + std::to_string(r) + " is not a log-probability vector");
    }
  }
}

void require_stochastic(const Matrix& p) {
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row_span(r)) {
      if (!(v >= 0.0 && v <= 1.0 + kRowSumTolerance)) {
        throw InvalidArgument("row " + std::to_string(r) + " has an entry outside [0, 1]");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > kRowSumTolerance) {
      throw InvalidArgument("row " + std::to_string(r) + " sums to " + std::to_string(s) + ", expected 1");
    }
  }
}

void require_labels_match(const Matrix& logp, const LabelBatch& labels) {
  labels.validate();
  if (logp.rows() != labels.size() || logp.cols() != labels.num_classes) {
    throw ShapeError("log-probabilities " + logp.shape_str() + " do not match " +
                     std::to_string(labels.size()) + " labels over " + std::to_string(labels.num_classes) +
                     " classes");
  }
}

ad::NodeId batch_mean(ad::Tape& tape, ad::NodeId per_entry, std::size_t batch) {
  return tape.scale(tape.sum(per_entry), 1.0 / static_cast<double>(batch));
}

// -mean_b sum_k target ⊙ logp
ad::NodeId soft_target_ce(ad::Tape& tape, ad::NodeId logp, Matrix target) {
  const std::size_t batch = target.rows();
  const ad::NodeId t = tape.constant(std::move(target));
  return tape.scale(tape.sum(tape.mul(logp, t)), -1.0 / static_cast<double>(batch));
}

}  // namespace

ProbBatch ProbBatch::from_probs(Matrix probs) {
  require_stochastic(probs);
  ProbBatch out;
  out.confidence.resize(probs.rows());
  out.predicted.resize(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto row = probs.row_span(r);
    const auto it = std::max_element(row.begin(), row.end());  // first maximum
    out.confidence[r] = *it;
    out.predicted[r] = static_cast<std::size_t>(it - row.begin());
  }
  out.probs = std::move(probs);
  return out;
}

ProbBatch ProbBatch::from_logits(const Matrix& logits) {
  Matrix p = ad::log_softmax_rows(logits);
  for (double& v : p.data()) v = std::exp(v);
  return from_probs(std::move(p));
}

void LabelBatch::validate() const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw InvalidArgument("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " is out of range for " + std::to_string(num_classes) + " classes");
    }
  }
}

Matrix LabelBatch::one_hot() const {
  validate();
  Matrix m(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, labels[i]) = 1.0;
  return m;
}

bool LossParts::has_term(std::string_view name) const {
  return std::any_of(terms.begin(), terms.end(), [&](const LossTerm& t) { return t.name == name; });
}

ad::NodeId cross_entropy(ad::Tape& tape, ad::NodeId logp, const LabelBatch& labels) {
  const Matrix& lp = tape.value(logp);
  require_labels_match(lp, labels);
  require_log_probs(lp);
  if (labels.size() == 0) throw InvalidArgument("cross_entropy on an empty batch");
  return soft_target_ce(tape, logp, labels.one_hot());
}

ad::NodeId kl_divergence(ad::Tape& tape, ad::NodeId p, ad::NodeId logq) {
  const Matrix& pv = tape.value(p);
  const Matrix& qv = tape.value(logq);
  if (!pv.same_shape(qv)) throw ShapeError("kl_divergence: " + pv.shape_str() + " vs " + qv.shape_str());
  if (pv.rows() == 0) throw InvalidArgument("kl_divergence on an empty batch");
  require_stochastic(pv);
  const ad::NodeId diff = tape.sub(tape.log(p), logq);
  return batch_mean(tape, tape.mul(p, diff), pv.rows());
}

LossParts mte_primary_loss(ad::Tape& tape, ad::NodeId f_logp, std::span<const ad::NodeId> aux_probs,
                           const LabelBatch& labels, double alpha) {
  if (aux_probs.empty()) throw InvalidArgument("mte_primary_loss needs at least one auxiliary model");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be a finite value >= 0");
  for (ad::NodeId g : aux_probs) require_opaque(tape, g, "auxiliary probabilities");

  const ad::NodeId ce = cross_entropy(tape, f_logp, labels);
  ad::NodeId kl_sum = kl_divergence(tape, aux_probs[0], f_logp);
  for (std::size_t i = 1; i < aux_probs.size(); ++i) {
    kl_sum = tape.add(kl_sum, kl_divergence(tape, aux_probs[i], f_logp));
  }
  const ad::NodeId kl = aux_probs.size() == 1
                            ? kl_sum
                            : tape.scale(kl_sum, 1.0 / static_cast<double>(aux_probs.size()));
  const ad::NodeId total = tape.add(ce, tape.scale(kl, alpha));
  return {total, {{"ce", ce}, {"kl", kl}}};
}

LossParts mte_auxiliary_loss(ad::Tape& tape, ad::NodeId f_prob, ad::NodeId g_logp) {
  require_opaque(tape, f_prob, "primary probabilities");
  const ad::NodeId kl = kl_divergence(tape, f_prob, g_logp);
  return {kl, {{"kl", kl}}};
}

LossParts dml_loss(ad::Tape& tape, ad::NodeId own_logp, ad::NodeId peer_prob, const LabelBatch& labels,
                   double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be a finite value >= 0");
  require_opaque(tape, peer_prob, "peer probabilities");
  const ad::NodeId ce = cross_entropy(tape, own_logp, labels);
  const ad::NodeId kl = kl_divergence(tape, peer_prob, own_logp);
  const ad::NodeId total = tape.add(ce, tape.scale(kl, alpha));
  return {total, {{"ce", ce}, {"kl", kl}}};
}

namespace {

void validate_weights(std::span<const double> weights, std::size_t members) {
  if (members == 0) throw InvalidArgument("ensemble needs at least one member");
  if (weights.size() != members) {
    throw InvalidArgument("ensemble has " + std::to_string(members) + " members but " +
                          std::to_string(weights.size()) + " weights");
  }
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("ensemble weights must be finite and >= 0");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument("ensemble weights sum to " + std::to_string(s) + ", not 1");
}

}  // namespace

ProbBatch ensemble_probs(std::span<const ProbBatch> members, std::span<const double> weights) {
  validate_weights(weights, members.size());
  const Matrix& first = members[0].probs;
  Matrix out(first.rows(), first.cols());
  for (std::size_t m = 0; m < members.size(); ++m) {
    const Matrix& p = members[m].probs;
    if (!p.same_shape(first)) throw ShapeError("ensemble member " + std::to_string(m) + " has shape " + p.shape_str());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[m] * p[i];
  }
  return ProbBatch::from_probs(std::move(out));
}

ad::NodeId mix_probs(ad::Tape& tape, std::span<const ad::NodeId> probs, std::span<const double> weights) {
  validate_weights(weights, probs.size());
  ad::NodeId acc = tape.scale(probs[0], weights[0]);
  for (std::size_t i = 1; i < probs.size(); ++i) acc = tape.add(acc, tape.scale(probs[i], weights[i]));
  return acc;
}

std::vector<double> uniform_weights(std::size_t n) {
  if (n == 0) throw InvalidArgument("uniform_weights of zero members");
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

void BaselineLossSpec::validate() const {
  if (!(param >= 0.0) || !std::isfinite(param)) throw InvalidArgument("baseline loss parameter must be >= 0");
  if (kind == BaselineKind::kLabelSmoothing && !(param < 1.0)) {
    throw InvalidArgument("label smoothing epsilon must be < 1");
  }
}

std::string baseline_kind_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kCrossEntropy: return "ce";
    case BaselineKind::kFocal: return "focal";
    case BaselineKind::kLabelSmoothing: return "label-smoothing";
    case BaselineKind::kEntropyReg: return "entropy-reg";
  }
  return "ce";
}

BaselineKind parse_baseline_kind(std::string_view name) {
  if (name == "ce") return BaselineKind::kCrossEntropy;
  if (name == "focal") return BaselineKind::kFocal;
  if (name == "label-smoothing") return BaselineKind::kLabelSmoothing;
  if (name == "entropy-reg") return BaselineKind::kEntropyReg;
  throw InvalidArgument("unknown baseline loss '" + std::string(name) + "'");
}

LossParts baseline_loss(ad::Tape& tape, const BaselineLossSpec& spec, ad::NodeId logp, const LabelBatch& labels) {
  spec.validate();
  switch (spec.kind) {
    case BaselineKind::kCrossEntropy: {
      const ad::NodeId ce = cross_entropy(tape, logp, labels);
      return {ce, {{"ce", ce}}};
    }
    case BaselineKind::kFocal: {
      const Matrix& lp = tape.value(logp);
      require_labels_match(lp, labels);
      require_log_probs(lp);
      // weight = exp(gamma * log(1 - p)) = (1 - p)^gamma
      const ad::NodeId one = tape.constant(Matrix::scalar(1.0));
      const ad::NodeId one_minus_p = tape.add(tape.scale(tape.exp(logp), -1.0), one);
      const ad::NodeId weight = tape.exp(tape.scale(tape.log(one_minus_p), spec.param));
      const ad::NodeId focal = soft_target_ce(tape, tape.mul(logp, weight), labels.one_hot());
      return {focal, {{"focal", focal}}};
    }
    case BaselineKind::kLabelSmoothing: {
      const Matrix& lp = tape.value(logp);
      require_labels_match(lp, labels);
      require_log_probs(lp);
      const double eps = spec.param;
      Matrix target = labels.one_hot();
      const double spread = eps / static_cast<double>(labels.num_classes);
      for (double& v : target.data()) v = (1.0 - eps) * v + spread;
      const ad::NodeId ls = soft_target_ce(tape, logp, std::move(target));
      return {ls, {{"ce_smoothed", ls}}};
    }
    case BaselineKind::kEntropyReg: {
      const ad::NodeId ce = cross_entropy(tape, logp, labels);
      // -H(p) = sum_k p log p, batch-averaged
      const ad::NodeId p = tape.exp(logp);
      const ad::NodeId neg_entropy = batch_mean(tape, tape.mul(p, logp), labels.size());
      const ad::NodeId total = tape.add(ce, tape.scale(neg_entropy, spec.param));
      return {total, {{"ce", ce}, {"neg_entropy", neg_entropy}}};
    }
  }
  throw InvalidArgument("unknown baseline kind");
}

}  // namespace mte::loss
