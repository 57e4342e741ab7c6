// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic classification data: isotropic Gaussian mixtures with tunable
// overlap and label noise, stratified splits, severity-graded corruptions,
// near/far out-of-distribution sets, and a plain CSV format.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mte/losses.hpp"
#include "mte/matrix.hpp"

namespace mte::data {

enum class Split { kNone, kTrain, kVal, kTest };
std::string split_name(Split s);

struct LabeledDataset {
  Matrix features;  // N x D
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  Split split = Split::kNone;
  /// Empty, or one 0/1 flag per row marking out-of-distribution samples.
  std::vector<std::uint8_t> ood;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  void validate() const;
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  loss::LabelBatch label_batch() const { return {labels, num_classes}; }
};

struct MixtureSpec {
  std::size_t num_classes = 3;
  std::size_t dim = 10;
  Matrix means;                    // K x D
  std::vector<double> cov_scale;   // per-class standard deviation (covariance = scale^2 * I)
  std::size_t samples_per_class = 3000;
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// K means evenly spaced on a circle of `radius` in the first two coordinates.
  static Matrix circle_means(std::size_t num_classes, std::size_t dim, double radius);
  /// The default experiment mixture: K=3, 3000 samples per class, overlapping
  /// classes on a circle in the first two coordinates, remaining coordinates
  /// pure noise.
  static MixtureSpec default_spec(std::uint64_t seed);
};

LabeledDataset make_gaussian_mixture(const MixtureSpec& spec);

struct SplitFractions {
  double train = 1.0;
  double val = 0.0;
  double test = 0.0;
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

/// Stratified partition. Each class's members are shuffled and given evenly
/// spaced positions in [0, 1); all samples are ordered by position and cut at
/// round(N * train) and round(N * (train + val)). Totals are exact and every
/// class keeps its proportion within about one sample.
DatasetSplits train_val_test_split(const LabeledDataset& ds, SplitFractions fractions, std::uint64_t seed);

enum class CorruptionKind { kGaussianNoise, kUniformNoise, kFeatureMask, kFeatureScale };
std::string corruption_name(CorruptionKind kind);
CorruptionKind parse_corruption_kind(std::string_view name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 1;

  void validate() const;
};

/// Severity tables (index = severity - 1):
///   gaussian-noise  sigma / feature-std            0.1 0.2 0.4 0.8 1.6
///   uniform-noise   half-width / feature-std       0.1 0.2 0.4 0.8 1.6  (times sqrt 3)
///   feature-mask    fraction of coordinates zeroed 0.1 0.2 0.3 0.4 0.5
///   feature-scale   factor about the feature mean  1.25 1.5 2.0 2.5 3.0
inline constexpr std::array<double, 5> kGaussianNoiseTable{0.1, 0.2, 0.4, 0.8, 1.6};
inline constexpr std::array<double, 5> kUniformNoiseTable{0.1, 0.2, 0.4, 0.8, 1.6};
inline constexpr std::array<double, 5> kFeatureMaskTable{0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> kFeatureScaleTable{1.25, 1.5, 2.0, 2.5, 3.0};

double severity_parameter(const CorruptionSpec& spec);

/// Perturbs features only; labels, K, split and OOD flags are preserved.
LabeledDataset corrupt(const LabeledDataset& ds, const CorruptionSpec& spec, std::uint64_t seed);

struct OodSplits {
  LabeledDataset in_dist;
  LabeledDataset near_ood;
  LabeledDataset far_ood;
  Matrix near_means;
  Matrix far_means;
};

/// near-OOD components sit at the midpoints of every pair of training means.
/// far-OOD components sit at the centroid of the means, displaced by
/// kFarOodScale * (mean extent + 3 sigma_max) along +- each direction
/// orthogonal to all mean offsets, where the generating posterior is uniform.
/// When the means span the whole space, each pair midpoint is pushed radially
/// out to that distance instead. OOD rows carry label 0 and ood = 1; every
/// component gets an equal share of samples_per_class * K rows.
inline constexpr double kFarOodScale = 4.0;
OodSplits make_ood_splits(const MixtureSpec& spec, std::uint64_t seed);

/// Header `f0,...,f{D-1},label[,ood]`; K is inferred as max label + 1.
LabeledDataset parse_csv(const std::string& text);
LabeledDataset load_csv(const std::filesystem::path& path);
std::string to_csv(const LabeledDataset& ds);
void save_csv(const LabeledDataset& ds, const std::filesystem::path& path);

/// Hex digest of (K, features, labels, ood flags).
std::string dataset_digest(const LabeledDataset& ds);

}  // namespace mte::data
