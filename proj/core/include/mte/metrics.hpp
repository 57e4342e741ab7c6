// SPDX-License-Identifier: Apache-2.0
#pragma once

// Calibration and detection metrics. Bin i of M covers ((i-1)/M, i/M]; the
// first bin also holds 0. Per-bin sums are accumulated in long double and the
// final value is rounded once, so the same BinStats always give the same ECE.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mte/losses.hpp"

namespace mte::metrics {

inline constexpr std::size_t kDefaultBins = 15;

/// Index in [0, m) of the bin holding probability p.
std::size_t bin_index(double p, std::size_t m);

struct BinStats {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<std::size_t> count;
  std::vector<long double> correct;   // number of correct predictions per bin
  std::vector<long double> conf_sum;  // summed confidence per bin

  double accuracy(std::size_t bin) const;    // 0 for an empty bin
  double confidence(std::size_t bin) const;  // 0 for an empty bin
  double gap(std::size_t bin) const { return std::abs(accuracy(bin) - confidence(bin)); }
  double lower(std::size_t bin) const { return static_cast<double>(bin) / static_cast<double>(m); }
  double upper(std::size_t bin) const { return static_cast<double>(bin + 1) / static_cast<double>(m); }
};

struct ClasswiseBinStats {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t num_classes = 0;
  /// Indexed [k * m + bin].
  std::vector<std::size_t> count;
  std::vector<long double> hits;
  std::vector<long double> conf_sum;

  double accuracy(std::size_t k, std::size_t bin) const;
  double confidence(std::size_t k, std::size_t bin) const;
};

struct EceResult {
  double value = 0.0;
  BinStats bins;
};

struct ClasswiseEceResult {
  double value = 0.0;
  ClasswiseBinStats bins;
};

EceResult ece(const loss::ProbBatch& probs, const loss::LabelBatch& labels, std::size_t m = kDefaultBins);
double ece_from_bins(const BinStats& bins);

ClasswiseEceResult classwise_ece(const loss::ProbBatch& probs, const loss::LabelBatch& labels,
                                 std::size_t m = kDefaultBins);
double classwise_ece_from_bins(const ClasswiseBinStats& bins);

BinStats reliability_diagram(const loss::ProbBatch& probs, const loss::LabelBatch& labels,
                             std::size_t m = kDefaultBins);

struct ConfidenceHistogram {
  std::vector<std::size_t> counts;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

ConfidenceHistogram confidence_histogram(const loss::ProbBatch& probs, const loss::LabelBatch& labels,
                                         std::size_t m = kDefaultBins);

double accuracy(const loss::ProbBatch& probs, const loss::LabelBatch& labels);

struct DetectionReport {
  double fpr95 = 0.0;
  double d_error = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  /// Which samples were scored as positives, e.g. "correct" or "in-distribution".
  std::string positive = "positive";
};

/// Threshold sweep over the unique scores, descending; a sample is flagged
/// positive when its score is >= the threshold.
///   fpr95   FPR at the first threshold reaching TPR >= 0.95, no interpolation
///   d_error 0.5 * (1 - 0.95) + 0.5 * fpr95
///   auroc   trapezoid over the ROC points
///   aupr    sum over thresholds of (recall step) * precision
DetectionReport detection_metrics(std::span<const double> pos, std::span<const double> neg);

/// Pairwise count: P(pos > neg) + 0.5 P(pos == neg).
double auroc_bruteforce(std::span<const double> pos, std::span<const double> neg);

struct ScoreSets {
  std::vector<double> pos;
  std::vector<double> neg;
};

/// Max-softmax scores; correctly classified samples are the positives.
ScoreSets misclassification_scores(const loss::ProbBatch& probs, const loss::LabelBatch& labels);
/// Max-softmax scores; in-distribution samples are the positives.
ScoreSets ood_scores(const loss::ProbBatch& in_dist, const loss::ProbBatch& out_dist);

}  // namespace mte::metrics
