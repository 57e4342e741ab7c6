// SPDX-License-Identifier: Apache-2.0
#include "mte/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "mte/error.hpp"

namespace mte::metrics {

namespace {

void check_inputs(const loss::ProbBatch& probs, const loss::LabelBatch& labels, std::size_t m) {
  if (m < 1) throw InvalidArgument("bin count must be >= 1");
  if (probs.size() == 0) throw InvalidArgument("cannot evaluate calibration on an empty dataset");
  if (labels.size() != probs.size()) {
    throw ShapeError("have " + std::to_string(probs.size()) + " predictions and " + std::to_string(labels.size()) +
                     " labels");
  }
  if (labels.num_classes != probs.num_classes()) {
    throw ShapeError("labels have K=" + std::to_string(labels.num_classes) + ", predictions have K=" +
                     std::to_string(probs.num_classes()));
  }
  labels.validate();
}

double ratio(long double num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num / static_cast<long double>(den));
}

}  // namespace

std::size_t bin_index(double p, std::size_t m) {
  const double md = static_cast<double>(m);
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(p * md)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(m) - 1);
  // Settle boundary cases against the exact edges i/M.
  while (idx > 0 && p <= static_cast<double>(idx) / md) --idx;
  while (idx + 1 < static_cast<std::ptrdiff_t>(m) && p > static_cast<double>(idx + 1) / md) ++idx;
  return static_cast<std::size_t>(idx);
}

double BinStats::accuracy(std::size_t bin) const { return ratio(correct.at(bin), count.at(bin)); }
double BinStats::confidence(std::size_t bin) const { return ratio(conf_sum.at(bin), count.at(bin)); }

double ClasswiseBinStats::accuracy(std::size_t k, std::size_t bin) const {
  return ratio(hits.at(k * m + bin), count.at(k * m + bin));
}
double ClasswiseBinStats::confidence(std::size_t k, std::size_t bin) const {
  return ratio(conf_sum.at(k * m + bin), count.at(k * m + bin));
}

BinStats reliability_diagram(const loss::ProbBatch& probs, const loss::LabelBatch& labels, std::size_t m) {
  check_inputs(probs, labels, m);
  BinStats s;
  s.m = m;
  s.n = probs.size();
  s.count.assign(m, 0);
  s.correct.assign(m, 0.0L);
  s.conf_sum.assign(m, 0.0L);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const std::size_t b = bin_index(probs.confidence[i], m);
    ++s.count[b];
    s.conf_sum[b] += probs.confidence[i];
    if (probs.predicted[i] == labels.labels[i]) s.correct[b] += 1.0L;
  }
  return s;
}

double ece_from_bins(const BinStats& bins) {
  if (bins.n == 0) throw InvalidArgument("cannot evaluate calibration on an empty dataset");
  // sum_i |B_i|/N |A_i - C_i| = (1/N) sum_i |correct_i - conf_sum_i|
  long double total = 0.0L;
  for (std::size_t b = 0; b < bins.m; ++b) total += std::fabs(bins.correct[b] - bins.conf_sum[b]);
  return static_cast<double>(total / static_cast<long double>(bins.n));
}

EceResult ece(const loss::ProbBatch& probs, const loss::LabelBatch& labels, std::size_t m) {
  EceResult r;
  r.bins = reliability_diagram(probs, labels, m);
  r.value = ece_from_bins(r.bins);
  return r;
}

double classwise_ece_from_bins(const ClasswiseBinStats& bins) {
  if (bins.n == 0 || bins.num_classes == 0) throw InvalidArgument("cannot evaluate calibration on an empty dataset");
  long double total = 0.0L;
  for (std::size_t i = 0; i < bins.count.size(); ++i) total += std::fabs(bins.hits[i] - bins.conf_sum[i]);
  return static_cast<double>(total / (static_cast<long double>(bins.n) * static_cast<long double>(bins.num_classes)));
}

ClasswiseEceResult classwise_ece(const loss::ProbBatch& probs, const loss::LabelBatch& labels, std::size_t m) {
  check_inputs(probs, labels, m);
  const std::size_t k_count = probs.num_classes();
  ClasswiseEceResult r;
  auto& s = r.bins;
  s.m = m;
  s.n = probs.size();
  s.num_classes = k_count;
  s.count.assign(k_count * m, 0);
  s.hits.assign(k_count * m, 0.0L);
  s.conf_sum.assign(k_count * m, 0.0L);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    for (std::size_t k = 0; k < k_count; ++k) {
      const double p = probs.probs(i, k);
      const std::size_t slot = k * m + bin_index(p, m);
      ++s.count[slot];
      s.conf_sum[slot] += p;
      if (labels.labels[i] == k) s.hits[slot] += 1.0L;
    }
  }
  r.value = classwise_ece_from_bins(s);
  return r;
}

ConfidenceHistogram confidence_histogram(const loss::ProbBatch& probs, const loss::LabelBatch& labels,
                                         std::size_t m) {
  const BinStats bins = reliability_diagram(probs, labels, m);
  ConfidenceHistogram h;
  h.counts = bins.count;
  long double conf = 0.0L, correct = 0.0L;
  for (std::size_t b = 0; b < m; ++b) {
    conf += bins.conf_sum[b];
    correct += bins.correct[b];
  }
  h.mean_confidence = static_cast<double>(conf / static_cast<long double>(bins.n));
  h.accuracy = static_cast<double>(correct / static_cast<long double>(bins.n));
  return h;
}

double accuracy(const loss::ProbBatch& probs, const loss::LabelBatch& labels) {
  check_inputs(probs, labels, 1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) correct += probs.predicted[i] == labels.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

DetectionReport detection_metrics(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw InvalidArgument("detection metrics need nonempty positive and negative scores");
  for (double s : pos) {
    if (std::isnan(s)) throw NonFiniteError("positive score is NaN");
  }
  for (double s : neg) {
    if (std::isnan(s)) throw NonFiniteError("negative score is NaN");
  }
  std::vector<std::pair<double, bool>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, true);
  for (double s : neg) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  const double n_pos = static_cast<double>(pos.size());
  const double n_neg = static_cast<double>(neg.size());
  std::size_t tp = 0, fp = 0;
  double prev_tpr = 0.0, prev_fpr = 0.0;
  double auroc = 0.0, aupr = 0.0;
  double fpr95 = 1.0;
  bool reached = false;
  std::size_t i = 0;
  while (i < all.size()) {
    const double t = all[i].first;
    for (; i < all.size() && all[i].first == t; ++i) (all[i].second ? tp : fp) += 1;
    const double tpr = static_cast<double>(tp) / n_pos;
    const double fpr = static_cast<double>(fp) / n_neg;
    auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    aupr += (tpr - prev_tpr) * static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (!reached && tpr >= 0.95) {
      fpr95 = fpr;
      reached = true;
    }
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  DetectionReport r;
  r.fpr95 = fpr95;
  r.d_error = 0.5 * (1.0 - 0.95) + 0.5 * fpr95;
  r.auroc = auroc;
  r.aupr = aupr;
  return r;
}

double auroc_bruteforce(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw InvalidArgument("auroc needs nonempty positive and negative scores");
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

ScoreSets misclassification_scores(const loss::ProbBatch& probs, const loss::LabelBatch& labels) {
  check_inputs(probs, labels, 1);
  ScoreSets s;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    (probs.predicted[i] == labels.labels[i] ? s.pos : s.neg).push_back(probs.confidence[i]);
  }
  return s;
}

ScoreSets ood_scores(const loss::ProbBatch& in_dist, const loss::ProbBatch& out_dist) {
  return {in_dist.confidence, out_dist.confidence};
}

}  // namespace mte::metrics
