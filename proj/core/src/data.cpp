// SPDX-License-Identifier: Apache-2.0
#include "mte/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mte/error.hpp"
#include "mte/io.hpp"
#include "mte/rng.hpp"

namespace mte::data {

namespace {

// Stream ids under a generator seed.
constexpr std::uint64_t kStreamFeatures = 1;
constexpr std::uint64_t kStreamLabelNoise = 2;
constexpr std::uint64_t kStreamSplit = 3;
constexpr std::uint64_t kStreamCorrupt = 4;
constexpr std::uint64_t kStreamNear = 5;
constexpr std::uint64_t kStreamFar = 6;

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Draws `count` samples from N(center, sigma^2 I) into rows [first, first + count).
void fill_gaussian(Matrix& out, std::size_t first, std::size_t count, std::span<const double> center, double sigma,
                   CounterRng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    auto row = out.row_span(first + i);
    for (std::size_t d = 0; d < center.size(); ++d) row[d] = center[d] + sigma * rng.normal();
  }
}

std::vector<double> feature_means(const Matrix& x) {
  std::vector<double> mu(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) mu[c] += x(r, c);
  }
  for (double& v : mu) v /= static_cast<double>(std::max<std::size_t>(x.rows(), 1));
  return mu;
}

std::vector<double> feature_stds(const Matrix& x) {
  const auto mu = feature_means(x);
  std::vector<double> var(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) var[c] += (x(r, c) - mu[c]) * (x(r, c) - mu[c]);
  }
  for (double& v : var) v = std::sqrt(v / static_cast<double>(std::max<std::size_t>(x.rows(), 1)));
  return var;
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::kNone: return "none";
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "none";
}

void LabeledDataset::validate() const {
  if (features.rows() != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(features.rows()) + " feature rows and " +
                     std::to_string(labels.size()) + " labels");
  }
  if (!ood.empty() && ood.size() != labels.size()) throw ShapeError("dataset OOD flags do not match row count");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw InvalidArgument("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " >= K=" +
                            std::to_string(num_classes));
    }
  }
  for (double v : features.data()) {
    if (std::isnan(v)) throw NonFiniteError("dataset contains NaN features");
  }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.features = gather_rows(features, rows);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(labels[r]);
  if (!ood.empty()) {
    for (std::size_t r : rows) out.ood.push_back(ood[r]);
  }
  out.num_classes = num_classes;
  out.split = split;
  return out;
}

Matrix MixtureSpec::circle_means(std::size_t num_classes, std::size_t dim, double radius) {
  if (dim < 1) throw InvalidArgument("circle_means needs dim >= 1");
  Matrix m(num_classes, dim);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double angle = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * static_cast<double>(k) /
                                                      static_cast<double>(num_classes);
    m(k, 0) = radius * std::cos(angle);
    if (dim > 1) m(k, 1) = radius * std::sin(angle);
  }
  return m;
}

MixtureSpec MixtureSpec::default_spec(std::uint64_t seed) {
  MixtureSpec s;
  s.num_classes = 3;
  s.dim = 10;
  s.means = circle_means(3, 10, 1.0);
  s.cov_scale.assign(3, 0.8);
  s.samples_per_class = 3000;
  s.label_noise = 0.0;
  s.seed = seed;
  return s;
}

void MixtureSpec::validate() const {
  if (num_classes < 2) throw InvalidArgument("mixture needs K >= 2 classes");
  if (dim < 1) throw InvalidArgument("mixture needs D >= 1");
  if (means.rows() != num_classes || means.cols() != dim) {
    throw ShapeError("mixture means are " + means.shape_str() + ", expected " + std::to_string(num_classes) + "x" +
                     std::to_string(dim));
  }
  if (!means.all_finite()) throw NonFiniteError("mixture means must be finite");
  for (std::size_t a = 0; a < num_classes; ++a) {
    for (std::size_t b = a + 1; b < num_classes; ++b) {
      if (distance(means.row_span(a), means.row_span(b)) == 0.0) {
        throw InvalidArgument("mixture means " + std::to_string(a) + " and " + std::to_string(b) + " coincide");
      }
    }
  }
  if (cov_scale.size() != num_classes) throw InvalidArgument("mixture needs one covariance scale per class");
  for (double s : cov_scale) {
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("mixture covariance scales must be positive");
  }
  if (samples_per_class == 0) throw InvalidArgument("mixture needs samples_per_class >= 1");
  if (!(label_noise >= 0.0 && label_noise < 1.0)) throw InvalidArgument("label noise rate must lie in [0, 1)");
}

LabeledDataset make_gaussian_mixture(const MixtureSpec& spec) {
  spec.validate();
  const std::size_t k_count = spec.num_classes;
  const std::size_t n = k_count * spec.samples_per_class;
  LabeledDataset ds;
  ds.features = Matrix(n, spec.dim);
  ds.labels.resize(n);
  ds.num_classes = k_count;

  CounterRng feat_rng(derive_key(spec.seed, kStreamFeatures));
  CounterRng noise_rng(derive_key(spec.seed, kStreamLabelNoise));
  for (std::size_t k = 0; k < k_count; ++k) {
    const std::size_t first = k * spec.samples_per_class;
    fill_gaussian(ds.features, first, spec.samples_per_class, spec.means.row_span(k), spec.cov_scale[k], feat_rng);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      std::size_t label = k;
      if (spec.label_noise > 0.0 && noise_rng.uniform() < spec.label_noise) {
        label = (k + 1 + noise_rng.below(k_count - 1)) % k_count;
      }
      ds.labels[first + i] = label;
    }
  }
  return ds;
}

DatasetSplits train_val_test_split(const LabeledDataset& ds, SplitFractions f, std::uint64_t seed) {
  ds.validate();
  const double fr[3] = {f.train, f.val, f.test};
  std::size_t positive = 0;
  for (double v : fr) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("split fractions must be >= 0");
    if (v > 0.0) ++positive;
  }
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");
  if (positive == 0) throw InvalidArgument("at least one split fraction must be positive");

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  for (std::size_t k = 0; k < ds.num_classes; ++k) {
    if (!by_class[k].empty() && by_class[k].size() < positive) {
      throw InvalidArgument("class " + std::to_string(k) + " has " + std::to_string(by_class[k].size()) +
                            " samples, too few to stratify over " + std::to_string(positive) + " splits");
    }
  }

  struct Slot {
    double position;
    std::size_t cls;
    std::size_t rank;
    std::size_t row;
  };
  std::vector<Slot> slots;
  slots.reserve(ds.size());
  CounterRng rng(derive_key(seed, kStreamSplit));
  for (std::size_t k = 0; k < ds.num_classes; ++k) {
    auto& members = by_class[k];
    shuffle(members, rng);
    const double n = static_cast<double>(members.size());
    for (std::size_t j = 0; j < members.size(); ++j) {
      slots.push_back({(static_cast<double>(j) + 0.5) / n, k, j, members[j]});
    }
  }
  std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
    if (a.position != b.position) return a.position < b.position;
    if (a.cls != b.cls) return a.cls < b.cls;
    return a.rank < b.rank;
  });

  const double total = static_cast<double>(ds.size());
  const std::size_t cut1 = static_cast<std::size_t>(std::llround(total * f.train));
  const std::size_t cut2 =
      std::min(ds.size(), std::max(cut1, static_cast<std::size_t>(std::llround(total * (f.train + f.val)))));
  std::vector<std::size_t> rows[3];
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const int which = i < cut1 ? 0 : (i < cut2 ? 1 : 2);
    rows[which].push_back(slots[i].row);
  }
  DatasetSplits out{ds.subset(rows[0]), ds.subset(rows[1]), ds.subset(rows[2])};
  out.train.split = Split::kTrain;
  out.val.split = Split::kVal;
  out.test.split = Split::kTest;
  return out;
}

std::string corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::kGaussianNoise: return "gaussian-noise";
    case CorruptionKind::kUniformNoise: return "uniform-noise";
    case CorruptionKind::kFeatureMask: return "feature-mask";
    case CorruptionKind::kFeatureScale: return "feature-scale";
  }
  return "gaussian-noise";
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  if (name == "gaussian-noise") return CorruptionKind::kGaussianNoise;
  if (name == "uniform-noise") return CorruptionKind::kUniformNoise;
  if (name == "feature-mask") return CorruptionKind::kFeatureMask;
  if (name == "feature-scale") return CorruptionKind::kFeatureScale;
  throw InvalidArgument("unknown corruption kind '" + std::string(name) + "'");
}

void CorruptionSpec::validate() const {
  if (severity < 1 || severity > 5) throw InvalidArgument("corruption severity must be in 1..5");
}

double severity_parameter(const CorruptionSpec& spec) {
  spec.validate();
  const auto i = static_cast<std::size_t>(spec.severity - 1);
  switch (spec.kind) {
    case CorruptionKind::kGaussianNoise: return kGaussianNoiseTable[i];
    case CorruptionKind::kUniformNoise: return kUniformNoiseTable[i];
    case CorruptionKind::kFeatureMask: return kFeatureMaskTable[i];
    case CorruptionKind::kFeatureScale: return kFeatureScaleTable[i];
  }
  throw InvalidArgument("unknown corruption kind");
}

LabeledDataset corrupt(const LabeledDataset& ds, const CorruptionSpec& spec, std::uint64_t seed) {
  const double level = severity_parameter(spec);
  LabeledDataset out = ds;
  Matrix& x = out.features;
  CounterRng rng(derive_key(seed, kStreamCorrupt));
  switch (spec.kind) {
    case CorruptionKind::kGaussianNoise: {
      const auto stds = feature_stds(ds.features);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += level * stds[c] * rng.normal();
      }
      break;
    }
    case CorruptionKind::kUniformNoise: {
      const auto stds = feature_stds(ds.features);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
          const double half = level * std::numbers::sqrt3 * stds[c];
          x(r, c) += rng.uniform(-half, half);
        }
      }
      break;
    }
    case CorruptionKind::kFeatureMask: {
      const std::size_t total = x.size();
      const auto masked = static_cast<std::size_t>(std::llround(level * static_cast<double>(total)));
      std::vector<std::size_t> idx(total);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      // partial Fisher-Yates: the first `masked` slots are a uniform sample
      for (std::size_t i = 0; i < masked; ++i) {
        const std::size_t j = i + rng.below(total - i);
        std::swap(idx[i], idx[j]);
        x[idx[i]] = 0.0;
      }
      break;
    }
    case CorruptionKind::kFeatureScale: {
      const auto mu = feature_means(ds.features);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = mu[c] + level * (x(r, c) - mu[c]);
      }
      break;
    }
  }
  return out;
}

OodSplits make_ood_splits(const MixtureSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t k_count = spec.num_classes, dim = spec.dim;
  MixtureSpec in_spec = spec;
  in_spec.seed = seed;
  OodSplits out;
  out.in_dist = make_gaussian_mixture(in_spec);

  std::vector<double> centroid(dim, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t d = 0; d < dim; ++d) centroid[d] += spec.means(k, d) / static_cast<double>(k_count);
  }
  double extent = 0.0;
  double sigma = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) {
    extent = std::max(extent, distance(spec.means.row_span(k), centroid));
    sigma = std::max(sigma, spec.cov_scale[k]);
  }
  const double far_radius = kFarOodScale * (extent + 3.0 * sigma);
  double mean_sigma = 0.0;
  for (double s : spec.cov_scale) mean_sigma += s / static_cast<double>(k_count);

  const std::size_t pairs = k_count * (k_count - 1) / 2;
  out.near_means = Matrix(pairs, dim);
  std::size_t p = 0;
  for (std::size_t a = 0; a < k_count; ++a) {
    for (std::size_t b = a + 1; b < k_count; ++b, ++p) {
      for (std::size_t d = 0; d < dim; ++d) out.near_means(p, d) = 0.5 * (spec.means(a, d) + spec.means(b, d));
    }
  }

  // Directions orthogonal to every mean offset carry no class information;
  // far components sit at centroid +- far_radius along each of them.
  const std::vector<std::vector<double>> free_dirs = [&] {
    std::vector<std::vector<double>> span, free;
    auto reduce = [&](std::vector<double> v, const std::vector<std::vector<double>>& against) {
      for (const auto& u : against) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += v[d] * u[d];
        for (std::size_t d = 0; d < dim; ++d) v[d] -= dot * u[d];
      }
      return v;
    };
    auto normalized = [](std::vector<double>& v, double tol) {
      double n = 0.0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      if (n <= tol) return false;
      for (double& x : v) x /= n;
      return true;
    };
    const double tol = 1e-9 * std::max(extent, 1.0);
    for (std::size_t k = 0; k < k_count; ++k) {
      std::vector<double> v(dim);
      for (std::size_t d = 0; d < dim; ++d) v[d] = spec.means(k, d) - centroid[d];
      v = reduce(std::move(v), span);
      if (normalized(v, tol)) span.push_back(std::move(v));
    }
    for (std::size_t e = 0; e < dim; ++e) {
      std::vector<double> v(dim, 0.0);
      v[e] = 1.0;
      v = reduce(reduce(std::move(v), span), free);
      if (normalized(v, 1e-6)) free.push_back(std::move(v));
    }
    return free;
  }();

  if (!free_dirs.empty()) {
    out.far_means = Matrix(2 * free_dirs.size(), dim);
    for (std::size_t i = 0; i < free_dirs.size(); ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        out.far_means(2 * i, d) = centroid[d] + far_radius * free_dirs[i][d];
        out.far_means(2 * i + 1, d) = centroid[d] - far_radius * free_dirs[i][d];
      }
    }
  } else {
    // The means span the whole space: push each pair midpoint radially outwards.
    out.far_means = Matrix(pairs, dim);
    for (std::size_t q = 0; q < pairs; ++q) {
      std::vector<double> dir(dim);
      double norm = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        dir[d] = out.near_means(q, d) - centroid[d];
        norm += dir[d] * dir[d];
      }
      norm = std::sqrt(norm);
      if (norm <= 1e-9 * std::max(extent, 1.0)) {
        std::fill(dir.begin(), dir.end(), 0.0);
        dir[0] = 1.0;
        norm = 1.0;
      }
      for (std::size_t d = 0; d < dim; ++d) out.far_means(q, d) = centroid[d] + far_radius * dir[d] / norm;
    }
  }

  auto sample_components = [&](const Matrix& centers, std::uint64_t stream) {
    LabeledDataset ds;
    const std::size_t total = spec.samples_per_class * k_count;
    ds.features = Matrix(total, dim);
    ds.labels.assign(total, 0);
    ds.ood.assign(total, 1);
    ds.num_classes = k_count;
    CounterRng rng(derive_key(seed, stream));
    std::size_t first = 0;
    for (std::size_t c = 0; c < centers.rows(); ++c) {
      const std::size_t count = total / centers.rows() + (c < total % centers.rows() ? 1 : 0);
      fill_gaussian(ds.features, first, count, centers.row_span(c), mean_sigma, rng);
      first += count;
    }
    return ds;
  };
  out.near_ood = sample_components(out.near_means, kStreamNear);
  out.far_ood = sample_components(out.far_means, kStreamFar);
  return out;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

[[noreturn]] void csv_fail(std::size_t line, const std::string& what) {
  throw ParseError("line " + std::to_string(line) + ": " + what);
}

}  // namespace

LabeledDataset parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  bool has_ood = false;
  bool header_seen = false;
  std::vector<double> feats;
  LabeledDataset ds;

  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (!header_seen) {
      header_seen = true;
      std::size_t c = 0;
      while (c < cells.size() && trim(cells[c]) == "f" + std::to_string(c)) ++c;
      dim = c;
      if (dim == 0) csv_fail(line_no, "header must start with f0");
      if (c >= cells.size() || trim(cells[c]) != "label") csv_fail(line_no, "expected 'label' after f" + std::to_string(dim - 1));
      ++c;
      if (c < cells.size()) {
        if (trim(cells[c]) != "ood" || c + 1 != cells.size()) csv_fail(line_no, "unexpected header columns after 'label'");
        has_ood = true;
      }
      continue;
    }
    const std::size_t expected = dim + 1 + (has_ood ? 1 : 0);
    if (cells.size() != expected) {
      csv_fail(line_no, "expected " + std::to_string(expected) + " cells, found " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < dim; ++c) {
      const std::string_view cell = trim(cells[c]);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        csv_fail(line_no, "column f" + std::to_string(c) + " is not a number: '" + std::string(cell) + "'");
      }
      if (!std::isfinite(v)) csv_fail(line_no, "column f" + std::to_string(c) + " is not finite");
      feats.push_back(v);
    }
    auto parse_uint = [&](std::string_view cell, const char* col) {
      cell = trim(cell);
      std::size_t v = 0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        csv_fail(line_no, std::string(col) + " is not a nonnegative integer: '" + std::string(cell) + "'");
      }
      return v;
    };
    ds.labels.push_back(parse_uint(cells[dim], "label"));
    if (has_ood) {
      const std::size_t flag = parse_uint(cells[dim + 1], "ood");
      if (flag > 1) csv_fail(line_no, "ood must be 0 or 1");
      ds.ood.push_back(static_cast<std::uint8_t>(flag));
    }
  }
  if (!header_seen) throw ParseError("line 1: empty file");
  if (ds.labels.empty()) throw ParseError("line " + std::to_string(line_no) + ": no data rows");
  ds.features = Matrix(ds.labels.size(), dim, std::move(feats));
  ds.num_classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

LabeledDataset load_csv(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

std::string to_csv(const LabeledDataset& ds) {
  ds.validate();
  std::string out;
  for (std::size_t c = 0; c < ds.dim(); ++c) out += "f" + std::to_string(c) + ",";
  out += "label";
  if (!ds.ood.empty()) out += ",ood";
  out += "\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t c = 0; c < ds.dim(); ++c) out += format_double(ds.features(r, c)) + ",";
    out += std::to_string(ds.labels[r]);
    if (!ds.ood.empty()) out += "," + std::to_string(ds.ood[r]);
    out += "\n";
  }
  return out;
}

void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) { write_file_atomic(path, to_csv(ds)); }

std::string dataset_digest(const LabeledDataset& ds) {
  std::string bytes;
  bytes.reserve(ds.features.size() * 8 + ds.labels.size() * 8 + 16);
  auto put = [&](const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); };
  const std::uint64_t k = ds.num_classes, d = ds.dim();
  put(&k, sizeof k);
  put(&d, sizeof d);
  put(ds.features.data().data(), ds.features.size() * sizeof(double));
  for (std::size_t l : ds.labels) {
    const std::uint64_t v = l;
    put(&v, sizeof v);
  }
  put(ds.ood.data(), ds.ood.size());
  return fnv1a_hex(bytes);
}

}  // namespace mte::data
