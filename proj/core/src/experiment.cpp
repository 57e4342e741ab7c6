// SPDX-License-Identifier: Apache-2.0
#include "mte/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "mte/io.hpp"
#include "mte/metrics.hpp"
#include "mte/rng.hpp"

namespace mte::exp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kReportFormat = "mte-report";
constexpr int kReportVersion = 1;

const std::vector<std::string> kTopKeys{"seed", "output_dir", "dataset", "training", "methods", "eval"};
const std::vector<std::string> kDatasetKeys{"source", "mixture", "csv_path", "split"};
const std::vector<std::string> kMixtureKeys{"num_classes", "dim",  "radius", "means", "cov_scale", "samples_per_class",
                                            "label_noise"};
const std::vector<std::string> kSplitKeys{"train", "val", "test"};
const std::vector<std::string> kTrainingKeys{"epochs",      "batch_size",     "primary_hidden", "aux_hidden",
                                             "lr",          "warm_epochs",    "decay_interval", "decay_factor",
                                             "aux_lr",      "momentum",       "weight_decay",   "update_order"};
const std::vector<std::string> kMethodOwnKeys{"name", "method", "alpha", "n_aux", "loss"};
const std::vector<std::string> kLossKeys{"kind", "param"};
const std::vector<std::string> kEvalKeys{"bins", "detection", "corruption", "alpha_sweep", "alpha_acc_tolerance",
                                         "save_checkpoints"};
const std::vector<std::string> kCorruptionKeys{"kinds", "severities"};
const std::vector<std::string> kDetectionTasks{"misclassification", "near-ood", "far-ood"};

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

std::string num(double v) { return format_double(v); }

// Collects field-level errors while reading a config tree.
class Reader {
 public:
  std::vector<std::string> errors;

  void fail(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }

  bool object(const json& j, const std::string& path) {
    if (j.is_object()) return true;
    fail(path, "must be an object");
    return false;
  }

  void known_keys(const json& obj, const std::string& path, const std::vector<std::string>& allowed) {
    for (const auto& item : obj.items()) {
      const std::string& key = item.key();
      if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
      std::string best;
      std::size_t best_d = std::string::npos;
      for (const auto& cand : allowed) {
        const std::size_t d = edit_distance(key, cand);
        if (d < best_d) {
          best_d = d;
          best = cand;
        }
      }
      std::string msg = "unknown key '" + key + "'";
      if (best_d <= std::max<std::size_t>(2, key.size() / 3)) msg += " (did you mean '" + best + "'?)";
      fail(path.empty() ? key : path + "." + key, msg);
    }
  }

  static std::string child(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

  double number(const json& obj, const std::string& path, const std::string& key, double fallback, double lo,
                double hi, bool lo_open = false) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    const std::string p = child(path, key);
    if (!v.is_number()) {
      fail(p, "must be a number");
      return fallback;
    }
    const double x = v.get<double>();
    if (!std::isfinite(x) || (lo_open ? !(x > lo) : !(x >= lo)) || !(x <= hi)) {
      std::string range = (lo_open ? "> " : ">= ") + num(lo);
      if (hi < std::numeric_limits<double>::max()) range += " and <= " + num(hi);
      fail(p, "must be " + range + " (got " + num(x) + ")");
      return fallback;
    }
    return x;
  }

  std::uint64_t integer(const json& obj, const std::string& path, const std::string& key, std::uint64_t fallback,
                        std::uint64_t lo) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    const std::string p = child(path, key);
    if (v.is_number_unsigned()) {
      const auto x = v.get<std::uint64_t>();
      if (x < lo) {
        fail(p, "must be an integer >= " + std::to_string(lo) + " (got " + std::to_string(x) + ")");
        return fallback;
      }
      return x;
    }
    if (v.is_number_integer()) {
      fail(p, "must be an integer >= " + std::to_string(lo) + " (got " + std::to_string(v.get<std::int64_t>()) + ")");
    } else {
      fail(p, "must be a nonnegative integer");
    }
    return fallback;
  }

  std::string string(const json& obj, const std::string& path, const std::string& key, std::string fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_string()) {
      fail(child(path, key), "must be a string");
      return fallback;
    }
    return v.get<std::string>();
  }

  bool boolean(const json& obj, const std::string& path, const std::string& key, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_boolean()) {
      fail(child(path, key), "must be true or false");
      return fallback;
    }
    return v.get<bool>();
  }

  std::vector<std::size_t> widths(const json& obj, const std::string& path, const std::string& key,
                                  std::vector<std::size_t> fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    const std::string p = child(path, key);
    if (!v.is_array()) {
      fail(p, "must be an array of positive integers");
      return fallback;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_unsigned() || v[i].get<std::uint64_t>() == 0) {
        fail(p + "[" + std::to_string(i) + "]", "must be a positive integer");
        return fallback;
      }
      out.push_back(v[i].get<std::size_t>());
    }
    return out;
  }
};

struct TrainingDefaults {
  std::size_t epochs = 60;
  std::size_t batch_size = 100;
  std::vector<std::size_t> primary_hidden{128, 128};
  std::vector<std::size_t> aux_hidden{64};
  double lr = 0.1;
  std::size_t warm_epochs = 30;
  std::size_t decay_interval = 10;
  double decay_factor = 0.5;
  std::optional<double> aux_lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  train::UpdateOrder update_order = train::UpdateOrder::kPrimaryFirst;
};

TrainingDefaults read_training(Reader& r, const json& obj, const std::string& path, TrainingDefaults t) {
  constexpr double kMax = std::numeric_limits<double>::max();
  t.epochs = r.integer(obj, path, "epochs", t.epochs, 0);
  t.batch_size = r.integer(obj, path, "batch_size", t.batch_size, 1);
  t.primary_hidden = r.widths(obj, path, "primary_hidden", t.primary_hidden);
  t.aux_hidden = r.widths(obj, path, "aux_hidden", t.aux_hidden);
  t.lr = r.number(obj, path, "lr", t.lr, 0.0, kMax, true);
  t.warm_epochs = r.integer(obj, path, "warm_epochs", t.warm_epochs, 0);
  t.decay_interval = r.integer(obj, path, "decay_interval", t.decay_interval, 1);
  t.decay_factor = r.number(obj, path, "decay_factor", t.decay_factor, 0.0, 1.0, true);
  if (obj.contains("aux_lr")) t.aux_lr = r.number(obj, path, "aux_lr", 0.01, 0.0, kMax, true);
  t.momentum = r.number(obj, path, "momentum", t.momentum, 0.0, 0.999999);
  t.weight_decay = r.number(obj, path, "weight_decay", t.weight_decay, 0.0, kMax);
  if (obj.contains("update_order")) {
    const std::string s = r.string(obj, path, "update_order", "primary-first");
    try {
      t.update_order = train::parse_update_order(s);
    } catch (const InvalidArgument& e) {
      r.fail(Reader::child(path, "update_order"), e.what());
    }
  }
  return t;
}

void apply_training(train::TrainConfig& tc, const TrainingDefaults& t) {
  tc.epochs = t.epochs;
  tc.batch_size = t.batch_size;
  tc.primary_hidden = t.primary_hidden;
  tc.aux_hidden = t.aux_hidden;
  tc.primary_schedule = {t.lr, t.warm_epochs, t.decay_interval, t.decay_factor};
  tc.aux_schedule = nn::LrSchedule::constant(t.aux_lr.value_or(t.lr / 10.0));
  tc.momentum = t.momentum;
  tc.weight_decay = t.weight_decay;
  tc.update_order = t.update_order;
}

void read_dataset(Reader& r, const json& j, DatasetConfig& ds, const fs::path& base_dir) {
  const std::string path = "dataset";
  if (!r.object(j, path)) return;
  r.known_keys(j, path, kDatasetKeys);
  ds.source = r.string(j, path, "source", ds.source);
  if (ds.source != "mixture" && ds.source != "csv") {
    r.fail("dataset.source", "must be 'mixture' or 'csv' (got '" + ds.source + "')");
  }
  if (j.contains("mixture")) {
    const json& m = j.at("mixture");
    const std::string mp = "dataset.mixture";
    if (r.object(m, mp)) {
      r.known_keys(m, mp, kMixtureKeys);
      auto& spec = ds.mixture;
      spec.num_classes = r.integer(m, mp, "num_classes", spec.num_classes, 2);
      spec.dim = r.integer(m, mp, "dim", spec.dim, 1);
      const double radius = r.number(m, mp, "radius", 1.0, 0.0, std::numeric_limits<double>::max(), true);
      spec.samples_per_class = r.integer(m, mp, "samples_per_class", spec.samples_per_class, 1);
      spec.label_noise = r.number(m, mp, "label_noise", spec.label_noise, 0.0, 0.999999);
      if (m.contains("means")) {
        const json& mm = m.at("means");
        bool ok = mm.is_array() && mm.size() == spec.num_classes;
        Matrix means(spec.num_classes, spec.dim);
        for (std::size_t k = 0; ok && k < mm.size(); ++k) {
          ok = mm[k].is_array() && mm[k].size() == spec.dim;
          for (std::size_t d = 0; ok && d < spec.dim; ++d) {
            ok = mm[k][d].is_number();
            if (ok) means(k, d) = mm[k][d].get<double>();
          }
        }
        if (ok) {
          spec.means = means;
        } else {
          r.fail(mp + ".means", "must be a " + std::to_string(spec.num_classes) + " x " + std::to_string(spec.dim) +
                                    " array of numbers");
        }
      } else {
        spec.means = data::MixtureSpec::circle_means(spec.num_classes, spec.dim, radius);
      }
      double scale = spec.cov_scale.empty() ? 1.0 : spec.cov_scale.front();
      if (m.contains("cov_scale") && m.at("cov_scale").is_array()) {
        const json& cs = m.at("cov_scale");
        std::vector<double> v;
        for (const auto& e : cs) {
          if (!e.is_number() || !(e.get<double>() > 0.0)) break;
          v.push_back(e.get<double>());
        }
        if (v.size() != cs.size() || v.size() != spec.num_classes) {
          r.fail(mp + ".cov_scale", "must be a positive number or one positive number per class");
        } else {
          spec.cov_scale = v;
        }
      } else {
        scale = r.number(m, mp, "cov_scale", scale, 0.0, std::numeric_limits<double>::max(), true);
        spec.cov_scale.assign(spec.num_classes, scale);
      }
      if (spec.cov_scale.size() != spec.num_classes) spec.cov_scale.assign(spec.num_classes, scale);
      if (r.errors.empty()) {
        try {
          spec.validate();
        } catch (const Error& e) {
          r.fail(mp, e.what());
        }
      }
    }
  }
  if (j.contains("csv_path")) {
    const fs::path p = r.string(j, path, "csv_path", "");
    ds.csv_path = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }
  if (ds.source == "csv" && ds.csv_path.empty()) r.fail("dataset.csv_path", "is required when source is 'csv'");
  if (j.contains("split")) {
    const json& s = j.at("split");
    if (r.object(s, "dataset.split")) {
      r.known_keys(s, "dataset.split", kSplitKeys);
      ds.split.train = r.number(s, "dataset.split", "train", ds.split.train, 0.0, 1.0);
      ds.split.val = r.number(s, "dataset.split", "val", ds.split.val, 0.0, 1.0);
      ds.split.test = r.number(s, "dataset.split", "test", ds.split.test, 0.0, 1.0);
      if (std::abs(ds.split.train + ds.split.val + ds.split.test - 1.0) > 1e-6) {
        r.fail("dataset.split", "fractions must sum to 1");
      }
    }
  }
  if (!(ds.split.train > 0.0)) r.fail("dataset.split.train", "must be > 0");
  if (!(ds.split.test > 0.0)) r.fail("dataset.split.test", "must be > 0");
}

void read_method(Reader& r, const json& j, const std::string& path, const TrainingDefaults& defaults,
                 MethodConfig& mc) {
  if (!r.object(j, path)) return;
  std::vector<std::string> allowed = kMethodOwnKeys;
  allowed.insert(allowed.end(), kTrainingKeys.begin(), kTrainingKeys.end());
  r.known_keys(j, path, allowed);
  auto& tc = mc.train;
  const std::string method = r.string(j, path, "method", "ce");
  try {
    tc.method = train::parse_method(method);
  } catch (const InvalidArgument& e) {
    r.fail(path + ".method", e.what());
  }
  mc.name = r.string(j, path, "name", method);
  tc.alpha = r.number(j, path, "alpha", tc.alpha, 0.0, std::numeric_limits<double>::max());
  const std::uint64_t default_n = tc.method == train::Method::kDe ? 3 : 1;
  tc.n_aux = r.integer(j, path, "n_aux", default_n, tc.method == train::Method::kDe ? 2 : 1);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    const std::string lp = path + ".loss";
    if (r.object(l, lp)) {
      r.known_keys(l, lp, kLossKeys);
      try {
        tc.baseline.kind = loss::parse_baseline_kind(r.string(l, lp, "kind", "ce"));
      } catch (const InvalidArgument& e) {
        r.fail(lp + ".kind", e.what());
      }
      tc.baseline.param = r.number(l, lp, "param", 0.0, 0.0, std::numeric_limits<double>::max());
      try {
        tc.baseline.validate();
      } catch (const InvalidArgument& e) {
        r.fail(lp, e.what());
      }
    }
  } else if (tc.method == train::Method::kBaseline) {
    r.fail(path + ".loss", "is required for method 'baseline'");
  }
  apply_training(tc, read_training(r, j, path, defaults));
}

void read_eval(Reader& r, const json& j, EvalConfig& ev) {
  const std::string path = "eval";
  if (!r.object(j, path)) return;
  r.known_keys(j, path, kEvalKeys);
  ev.bins = r.integer(j, path, "bins", ev.bins, 1);
  if (j.contains("detection")) {
    const json& d = j.at("detection");
    ev.detection.clear();
    if (!d.is_array()) {
      r.fail("eval.detection", "must be an array of task names");
    } else {
      for (std::size_t i = 0; i < d.size(); ++i) {
        const std::string p = "eval.detection[" + std::to_string(i) + "]";
        if (!d[i].is_string() ||
            std::find(kDetectionTasks.begin(), kDetectionTasks.end(), d[i].get<std::string>()) ==
                kDetectionTasks.end()) {
          r.fail(p, "must be one of " + join(kDetectionTasks, ", "));
        } else {
          ev.detection.push_back(d[i].get<std::string>());
        }
      }
    }
  }
  if (j.contains("corruption") && !j.at("corruption").is_null()) {
    const json& c = j.at("corruption");
    if (r.object(c, "eval.corruption")) {
      r.known_keys(c, "eval.corruption", kCorruptionKeys);
      CorruptionSweep sw;
      sw.kinds = {data::CorruptionKind::kGaussianNoise};
      if (c.contains("kinds")) {
        sw.kinds.clear();
        const json& ks = c.at("kinds");
        if (!ks.is_array()) {
          r.fail("eval.corruption.kinds", "must be an array of corruption names");
        } else {
          for (std::size_t i = 0; i < ks.size(); ++i) {
            try {
              if (!ks[i].is_string()) throw InvalidArgument("must be a corruption name");
              sw.kinds.push_back(data::parse_corruption_kind(ks[i].get<std::string>()));
            } catch (const InvalidArgument& e) {
              r.fail("eval.corruption.kinds[" + std::to_string(i) + "]", e.what());
            }
          }
        }
      }
      if (c.contains("severities")) {
        sw.severities.clear();
        const json& ss = c.at("severities");
        if (!ss.is_array()) {
          r.fail("eval.corruption.severities", "must be an array of integers in 1..5");
        } else {
          for (std::size_t i = 0; i < ss.size(); ++i) {
            if (!ss[i].is_number_integer() || ss[i].get<int>() < 1 || ss[i].get<int>() > 5) {
              r.fail("eval.corruption.severities[" + std::to_string(i) + "]", "must be an integer in 1..5");
            } else {
              sw.severities.push_back(ss[i].get<int>());
            }
          }
        }
      }
      ev.corruption = sw;
    }
  }
  if (j.contains("alpha_sweep")) {
    const json& a = j.at("alpha_sweep");
    if (!a.is_array()) {
      r.fail("eval.alpha_sweep", "must be an array of numbers >= 0");
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number() || !(a[i].get<double>() >= 0.0)) {
          r.fail("eval.alpha_sweep[" + std::to_string(i) + "]", "must be a number >= 0");
        } else {
          ev.alpha_sweep.push_back(a[i].get<double>());
        }
      }
    }
  }
  ev.alpha_acc_tolerance = r.number(j, path, "alpha_acc_tolerance", ev.alpha_acc_tolerance, 0.0, 1.0);
  ev.save_checkpoints = r.boolean(j, path, "save_checkpoints", ev.save_checkpoints);
}

ExperimentConfig parse_tree(const json& root, const fs::path& base_dir, Reader& r) {
  ExperimentConfig cfg;
  if (!r.object(root, "config")) return cfg;
  r.known_keys(root, "", kTopKeys);
  cfg.seed = r.integer(root, "", "seed", 0, 0);
  if (root.contains("output_dir")) cfg.output_dir = r.string(root, "", "output_dir", "");
  if (root.contains("dataset")) read_dataset(r, root.at("dataset"), cfg.dataset, base_dir);

  TrainingDefaults defaults;
  if (root.contains("training")) {
    const json& t = root.at("training");
    if (r.object(t, "training")) {
      r.known_keys(t, "training", kTrainingKeys);
      defaults = read_training(r, t, "training", defaults);
    }
  }
  if (!root.contains("methods")) {
    r.fail("methods", "is required");
  } else if (!root.at("methods").is_array() || root.at("methods").empty()) {
    r.fail("methods", "must be a nonempty array");
  } else {
    std::set<std::string> names;
    const json& ms = root.at("methods");
    for (std::size_t i = 0; i < ms.size(); ++i) {
      MethodConfig mc;
      const std::string path = "methods[" + std::to_string(i) + "]";
      read_method(r, ms[i], path, defaults, mc);
      if (!names.insert(mc.name).second) r.fail(path + ".name", "duplicate method name '" + mc.name + "'");
      cfg.methods.push_back(std::move(mc));
    }
  }
  if (root.contains("eval")) read_eval(r, root.at("eval"), cfg.eval);
  for (auto& m : cfg.methods) m.train.ece_bins = cfg.eval.bins;
  if (cfg.dataset.source == "csv") {
    for (const auto& t : cfg.eval.detection) {
      if (t != "misclassification") r.fail("eval.detection", "task '" + t + "' needs a mixture dataset");
    }
  }
  return cfg;
}

json mixture_json(const data::MixtureSpec& m) {
  json means = json::array();
  for (std::size_t k = 0; k < m.means.rows(); ++k) {
    means.push_back(std::vector<double>(m.means.row_span(k).begin(), m.means.row_span(k).end()));
  }
  return {{"num_classes", m.num_classes}, {"dim", m.dim},           {"means", means},
          {"cov_scale", m.cov_scale},     {"samples_per_class", m.samples_per_class},
          {"label_noise", m.label_noise}};
}

json train_json(const train::TrainConfig& t) {
  json j = {{"method", train::method_name(t.method)},
            {"alpha", t.alpha},
            {"n_aux", t.n_aux},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"primary_hidden", t.primary_hidden},
            {"aux_hidden", t.aux_hidden},
            {"lr", t.primary_schedule.initial},
            {"warm_epochs", t.primary_schedule.warm_epochs},
            {"decay_interval", t.primary_schedule.decay_interval},
            {"decay_factor", t.primary_schedule.decay_factor},
            {"aux_lr", t.aux_schedule.initial},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"update_order", train::update_order_name(t.update_order)}};
  if (t.method == train::Method::kBaseline) {
    j["loss"] = {{"kind", loss::baseline_kind_name(t.baseline.kind)}, {"param", t.baseline.param}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Pipeline

struct Prepared {
  data::DatasetSplits splits;
  std::optional<data::OodSplits> ood;
  std::string digest;
};

Prepared prepare_data(const ExperimentConfig& cfg) {
  Prepared p;
  data::LabeledDataset full;
  if (cfg.dataset.source == "csv") {
    full = data::load_csv(cfg.dataset.csv_path);
  } else {
    data::MixtureSpec spec = cfg.dataset.mixture;
    spec.seed = cfg.seed;
    full = data::make_gaussian_mixture(spec);
  }
  p.splits = data::train_val_test_split(full, cfg.dataset.split, cfg.seed);
  const bool needs_ood = std::any_of(cfg.eval.detection.begin(), cfg.eval.detection.end(),
                                     [](const std::string& t) { return t != "misclassification"; });
  if (needs_ood) p.ood = data::make_ood_splits(cfg.dataset.mixture, cfg.seed);
  p.digest = fnv1a_hex(data::dataset_digest(p.splits.train) + data::dataset_digest(p.splits.val) +
                       data::dataset_digest(p.splits.test));
  return p;
}

struct Trained {
  std::vector<std::pair<std::string, nn::ModelCheckpoint>> checkpoints;  // role -> model
  std::vector<nn::ModelCheckpoint> predict_set;
  train::PredictMode mode;
  train::TrainHistory history;
};

Trained train_method(const train::TrainConfig& tc, const data::DatasetSplits& s) {
  Trained t;
  switch (tc.method) {
    case train::Method::kCe:
    case train::Method::kBaseline: {
      auto r = train::train_single(tc, s.train, s.val);
      t.checkpoints.emplace_back("primary", r.model);
      t.predict_set.push_back(std::move(r.model));
      t.history = std::move(r.history);
      break;
    }
    case train::Method::kMte: {
      auto r = train::train_mte(tc, s.train, s.val);
      t.checkpoints.emplace_back("primary", r.primary);
      for (std::size_t i = 0; i < r.aux.size(); ++i) t.checkpoints.emplace_back("aux" + std::to_string(i), r.aux[i]);
      t.predict_set.push_back(std::move(r.primary));
      t.history = std::move(r.history);
      break;
    }
    case train::Method::kDml: {
      auto r = train::train_dml(tc, s.train, s.val);
      for (std::size_t i = 0; i < r.models.size(); ++i) {
        t.checkpoints.emplace_back("model" + std::to_string(i), r.models[i]);
      }
      t.predict_set.push_back(std::move(r.models[0]));
      t.history = std::move(r.history);
      break;
    }
    case train::Method::kDe: {
      auto r = train::train_deep_ensemble(tc, s.train, s.val);
      for (std::size_t i = 0; i < r.members.size(); ++i) {
        t.checkpoints.emplace_back("member" + std::to_string(i), r.members[i]);
      }
      t.predict_set = std::move(r.members);
      t.mode = train::PredictMode::ensemble();
      t.history = std::move(r.histories.front());
      break;
    }
  }
  return t;
}

json detection_json(const std::string& task, const metrics::ScoreSets& s, const std::string& positive) {
  json j = {{"task", task}, {"positive", positive}, {"n_pos", s.pos.size()}, {"n_neg", s.neg.size()}};
  if (s.pos.empty() || s.neg.empty()) {
    j["fpr95"] = nullptr;
    j["d_error"] = nullptr;
    j["auroc"] = nullptr;
    j["aupr"] = nullptr;
    return j;
  }
  const metrics::DetectionReport d = metrics::detection_metrics(s.pos, s.neg);
  j["fpr95"] = d.fpr95;
  j["d_error"] = d.d_error;
  j["auroc"] = d.auroc;
  j["aupr"] = d.aupr;
  return j;
}

json history_json(const train::TrainHistory& h) {
  json rows = json::array();
  for (const auto& e : h.epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"lr", e.lr},
                    {"losses", e.losses},
                    {"val_acc", e.val_accuracy},
                    {"val_ece", e.val_ece}});
  }
  return rows;
}

json evaluate_method(const MethodConfig& mc, const ExperimentConfig& cfg, const Prepared& data,
                     Trained& trained) {
  const auto& test = data.splits.test;
  const loss::LabelBatch labels = test.label_batch();
  const std::size_t m = cfg.eval.bins;

  const std::uint64_t before = nn::forward_pass_count();
  const loss::ProbBatch probs = train::predict(trained.predict_set, test.features, trained.mode);
  const std::uint64_t evaluated = nn::forward_pass_count() - before;

  const auto e = metrics::ece(probs, labels, m);
  const auto cw = metrics::classwise_ece(probs, labels, m);
  const auto hist = metrics::confidence_histogram(probs, labels, m);

  json j;
  j["name"] = mc.name;
  j["method"] = train::method_name(mc.train.method);
  j["train"] = train_json(mc.train);
  j["accuracy"] = metrics::accuracy(probs, labels);
  j["ece"] = e.value;
  j["cw_ece"] = cw.value;
  j["models_evaluated"] = evaluated;
  j["checkpoints"] = json::array();
  for (const auto& [role, ck] : trained.checkpoints) j["checkpoints"].push_back(role);
  j["loss_terms"] = trained.history.loss_terms;

  json rel = json::array();
  for (std::size_t b = 0; b < m; ++b) {
    rel.push_back({{"bin", b},
                   {"lower", e.bins.lower(b)},
                   {"upper", e.bins.upper(b)},
                   {"count", e.bins.count[b]},
                   {"accuracy", e.bins.accuracy(b)},
                   {"confidence", e.bins.confidence(b)},
                   {"gap", e.bins.gap(b)}});
  }
  j["reliability"] = rel;
  j["confidence_hist"] = {
      {"counts", hist.counts}, {"mean_confidence", hist.mean_confidence}, {"accuracy", hist.accuracy}};

  json det = json::array();
  for (const auto& task : cfg.eval.detection) {
    if (task == "misclassification") {
      det.push_back(detection_json(task, metrics::misclassification_scores(probs, labels), "correct"));
    } else {
      const auto& ood = task == "near-ood" ? data.ood->near_ood : data.ood->far_ood;
      const loss::ProbBatch out = train::predict(trained.predict_set, ood.features, trained.mode);
      det.push_back(detection_json(task, metrics::ood_scores(probs, out), "in-distribution"));
    }
  }
  if (!cfg.eval.detection.empty()) j["detection"] = det;

  if (cfg.eval.corruption) {
    json rows = json::array();
    for (const auto kind : cfg.eval.corruption->kinds) {
      for (const int sev : cfg.eval.corruption->severities) {
        const data::LabeledDataset c = data::corrupt(test, {kind, sev}, cfg.seed);
        const loss::ProbBatch cp = train::predict(trained.predict_set, c.features, trained.mode);
        rows.push_back({{"kind", data::corruption_name(kind)},
                        {"severity", sev},
                        {"parameter", data::severity_parameter({kind, sev})},
                        {"accuracy", metrics::accuracy(cp, labels)},
                        {"ece", metrics::ece(cp, labels, m).value}});
      }
    }
    j["corruption"] = rows;
  }

  if (!cfg.eval.alpha_sweep.empty() && mc.train.method == train::Method::kMte) {
    json rows = json::array();
    std::vector<AlphaPoint> points;
    const loss::LabelBatch val_labels = data.splits.val.label_batch();
    for (const double a : cfg.eval.alpha_sweep) {
      train::TrainConfig tc = mc.train;
      tc.alpha = a;
      Trained t = train_method(tc, data.splits);
      const loss::ProbBatch vp = train::predict(t.predict_set, data.splits.val.features, t.mode);
      const loss::ProbBatch tp = train::predict(t.predict_set, test.features, t.mode);
      AlphaPoint pt{a, metrics::accuracy(vp, val_labels), metrics::ece(vp, val_labels, m).value};
      points.push_back(pt);
      rows.push_back({{"alpha", a},
                      {"val_accuracy", pt.val_accuracy},
                      {"val_ece", pt.val_ece},
                      {"test_accuracy", metrics::accuracy(tp, labels)},
                      {"test_ece", metrics::ece(tp, labels, m).value}});
    }
    j["alpha_sweep"] = rows;
    j["selected_alpha"] = select_alpha(points, cfg.eval.alpha_acc_tolerance);
  }
  j["history"] = history_json(trained.history);
  return j;
}

struct RunArtifacts {
  std::string report;
  std::vector<std::pair<fs::path, std::string>> checkpoints;
};

RunArtifacts run_all(const ExperimentConfig& cfg, bool keep_checkpoints) {
  const Prepared prepared = prepare_data(cfg);
  json report;
  report["format"] = kReportFormat;
  report["format_version"] = kReportVersion;
  report["seed"] = std::to_string(cfg.seed);
  report["config_digest"] = cfg.digest();
  report["config"] = json::parse(cfg.canonical_json());
  report["bins"] = cfg.eval.bins;
  const auto& s = prepared.splits;
  report["dataset"] = {{"digest", prepared.digest},
                       {"source", cfg.dataset.source},
                       {"num_classes", s.train.num_classes},
                       {"dim", s.train.dim()},
                       {"n_train", s.train.size()},
                       {"n_val", s.val.size()},
                       {"n_test", s.test.size()}};
  RunArtifacts out;
  json methods = json::array();
  for (const auto& mc : cfg.methods) {
    train::TrainConfig tc = mc.train;
    tc.seed = cfg.seed;
    tc.config_digest = cfg.digest();
    MethodConfig run_mc{mc.name, tc};
    Trained trained = train_method(tc, s);
    methods.push_back(evaluate_method(run_mc, cfg, prepared, trained));
    if (keep_checkpoints) {
      for (const auto& [role, ck] : trained.checkpoints) {
        out.checkpoints.emplace_back(fs::path("checkpoints") / mc.name / (role + ".json"), nn::checkpoint_to_json(ck));
      }
    }
  }
  report["methods"] = methods;
  out.report = report.dump(2) + "\n";
  return out;
}

std::string cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_number()) return v.dump();
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

// Flat per-method summary used by compare and sweep.
std::vector<std::pair<std::string, std::string>> summary_cells(const json& method) {
  std::vector<std::pair<std::string, std::string>> out{
      {"name", cell(method.at("name"))},         {"method", cell(method.at("method"))},
      {"accuracy", cell(method.at("accuracy"))}, {"ece", cell(method.at("ece"))},
      {"cw_ece", cell(method.at("cw_ece"))},
  };
  if (method.contains("detection")) {
    for (const auto& d : method.at("detection")) {
      const std::string t = d.at("task").get<std::string>();
      for (const char* k : {"auroc", "aupr", "fpr95", "d_error"}) out.emplace_back(t + "_" + k, cell(d.at(k)));
    }
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors)
    : InvalidArgument("invalid config:\n  " + join(errors, "\n  ")), errors_(std::move(errors)) {}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double select_alpha(const std::vector<AlphaPoint>& points, double acc_tolerance) {
  if (points.empty()) throw InvalidArgument("alpha selection needs at least one sweep point");
  double best_acc = 0.0;
  for (const auto& p : points) best_acc = std::max(best_acc, p.val_accuracy);
  const AlphaPoint* chosen = nullptr;
  for (const auto& p : points) {
    if (p.val_accuracy + acc_tolerance < best_acc) continue;
    if (!chosen || p.val_ece < chosen->val_ece) chosen = &p;
  }
  return chosen->alpha;
}

std::string ExperimentConfig::canonical_json() const {
  json j;
  json ds = {{"source", dataset.source},
             {"split", {{"train", dataset.split.train}, {"val", dataset.split.val}, {"test", dataset.split.test}}}};
  if (dataset.source == "csv") {
    ds["csv_path"] = dataset.csv_path.string();
  } else {
    ds["mixture"] = mixture_json(dataset.mixture);
  }
  j["dataset"] = ds;
  json ms = json::array();
  for (const auto& m : methods) {
    json mj = train_json(m.train);
    mj["name"] = m.name;
    ms.push_back(mj);
  }
  j["methods"] = ms;
  json ev = {{"bins", eval.bins},
             {"detection", eval.detection},
             {"alpha_sweep", eval.alpha_sweep},
             {"alpha_acc_tolerance", eval.alpha_acc_tolerance},
             {"save_checkpoints", eval.save_checkpoints}};
  if (eval.corruption) {
    std::vector<std::string> kinds;
    for (auto k : eval.corruption->kinds) kinds.push_back(data::corruption_name(k));
    ev["corruption"] = {{"kinds", kinds}, {"severities", eval.corruption->severities}};
  } else {
    ev["corruption"] = nullptr;
  }
  j["eval"] = ev;
  return j.dump();
}

std::string ExperimentConfig::digest() const { return fnv1a_hex(canonical_json()); }

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  Reader r;
  ExperimentConfig cfg = parse_tree(root, base_dir, r);
  if (!r.errors.empty()) throw ConfigError(r.errors);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError({e.what()});
  }
  return parse_config(text, path.parent_path());
}

std::vector<std::string> validate_config(const fs::path& path) {
  try {
    load_config(path);
  } catch (const ConfigError& e) {
    return e.errors();
  }
  return {};
}

std::string run_report(const ExperimentConfig& cfg) { return run_all(cfg, false).report; }

std::string run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const RunArtifacts art = run_all(cfg, cfg.eval.save_checkpoints);
  fs::create_directories(out_dir);
  for (const auto& [rel, content] : art.checkpoints) {
    fs::create_directories((out_dir / rel).parent_path());
    write_file_atomic(out_dir / rel, content);
  }
  for (const auto& [name, content] : report_tables(art.report)) write_file_atomic(out_dir / name, content);
  write_file_atomic(out_dir / "report.json", art.report);
  return art.report;
}

std::vector<std::pair<std::string, std::string>> report_tables(const std::string& report_json) {
  const json r = json::parse(report_json);
  if (!r.contains("format") || r.at("format") != kReportFormat) throw ParseError("not an mte report");
  const json& methods = r.at("methods");
  std::vector<std::pair<std::string, std::string>> out;

  std::string metrics_csv = "name,method,accuracy,ece,cw_ece,models_evaluated,checkpoints\n";
  std::string rel = "name,bin,lower,upper,count,accuracy,confidence,gap\n";
  std::string hist = "name,bin,lower,upper,count,mean_confidence,accuracy\n";
  std::string det = "name,task,positive,n_pos,n_neg,fpr95,d_error,auroc,aupr\n";
  std::string corr = "name,kind,severity,parameter,accuracy,ece\n";
  std::string alpha = "name,alpha,val_accuracy,val_ece,test_accuracy,test_ece,selected\n";
  bool has_det = false, has_corr = false, has_alpha = false;

  std::vector<std::string> loss_keys;
  for (const auto& m : methods) {
    for (const auto& e : m.at("history")) {
      for (const auto& item : e.at("losses").items()) {
        if (std::find(loss_keys.begin(), loss_keys.end(), item.key()) == loss_keys.end()) loss_keys.push_back(item.key());
      }
    }
  }
  std::sort(loss_keys.begin(), loss_keys.end());
  std::string history = "name,epoch,lr";
  for (const auto& k : loss_keys) history += "," + k;
  history += ",val_acc,val_ece\n";

  for (const auto& m : methods) {
    const std::string name = cell(m.at("name"));
    metrics_csv += name + "," + cell(m.at("method")) + "," + cell(m.at("accuracy")) + "," + cell(m.at("ece")) + "," +
                   cell(m.at("cw_ece")) + "," + cell(m.at("models_evaluated")) + "," +
                   std::to_string(m.at("checkpoints").size()) + "\n";
    for (const auto& b : m.at("reliability")) {
      rel += name + "," + cell(b.at("bin")) + "," + cell(b.at("lower")) + "," + cell(b.at("upper")) + "," +
             cell(b.at("count")) + "," + cell(b.at("accuracy")) + "," + cell(b.at("confidence")) + "," +
             cell(b.at("gap")) + "\n";
    }
    const json& h = m.at("confidence_hist");
    const json& counts = h.at("counts");
    for (std::size_t b = 0; b < counts.size(); ++b) {
      hist += name + "," + std::to_string(b) + "," + cell(m.at("reliability")[b].at("lower")) + "," +
              cell(m.at("reliability")[b].at("upper")) + "," + cell(counts[b]) + "," +
              cell(h.at("mean_confidence")) + "," + cell(h.at("accuracy")) + "\n";
    }
    if (m.contains("detection")) {
      has_det = true;
      for (const auto& d : m.at("detection")) {
        det += name + "," + cell(d.at("task")) + "," + cell(d.at("positive")) + "," + cell(d.at("n_pos")) + "," +
               cell(d.at("n_neg")) + "," + cell(d.at("fpr95")) + "," + cell(d.at("d_error")) + "," +
               cell(d.at("auroc")) + "," + cell(d.at("aupr")) + "\n";
      }
    }
    if (m.contains("corruption")) {
      has_corr = true;
      for (const auto& c : m.at("corruption")) {
        corr += name + "," + cell(c.at("kind")) + "," + cell(c.at("severity")) + "," + cell(c.at("parameter")) + "," +
                cell(c.at("accuracy")) + "," + cell(c.at("ece")) + "\n";
      }
    }
    if (m.contains("alpha_sweep")) {
      has_alpha = true;
      const double selected = m.at("selected_alpha").get<double>();
      for (const auto& a : m.at("alpha_sweep")) {
        alpha += name + "," + cell(a.at("alpha")) + "," + cell(a.at("val_accuracy")) + "," + cell(a.at("val_ece")) +
                 "," + cell(a.at("test_accuracy")) + "," + cell(a.at("test_ece")) + "," +
                 (a.at("alpha").get<double>() == selected ? "1" : "0") + "\n";
      }
    }
    for (const auto& e : m.at("history")) {
      history += name + "," + cell(e.at("epoch")) + "," + cell(e.at("lr"));
      for (const auto& k : loss_keys) history += "," + (e.at("losses").contains(k) ? cell(e.at("losses").at(k)) : "");
      history += "," + cell(e.at("val_acc")) + "," + cell(e.at("val_ece")) + "\n";
    }
  }
  out.emplace_back("metrics.csv", metrics_csv);
  out.emplace_back("reliability.csv", rel);
  out.emplace_back("confidence_hist.csv", hist);
  if (has_det) out.emplace_back("detection.csv", det);
  if (has_corr) out.emplace_back("corruption_sweep.csv", corr);
  if (has_alpha) out.emplace_back("alpha_sweep.csv", alpha);
  out.emplace_back("history.csv", history);
  return out;
}

std::string compare_reports(const std::vector<fs::path>& reports) {
  if (reports.size() < 2) throw InvalidArgument("compare needs at least two reports");
  std::vector<json> parsed;
  for (const auto& p : reports) {
    try {
      parsed.push_back(json::parse(read_file(p)));
    } catch (const json::parse_error& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
    if (!parsed.back().contains("format") || parsed.back().at("format") != kReportFormat) {
      throw ParseError(p.string() + ": not an mte report");
    }
  }
  const std::string digest = parsed.front().at("dataset").at("digest");
  for (std::size_t i = 1; i < parsed.size(); ++i) {
    const std::string other = parsed[i].at("dataset").at("digest");
    if (other != digest) {
      throw InvalidArgument("dataset digest of " + reports[i].string() + " (" + other + ") differs from " +
                            reports[0].string() + " (" + digest + ")");
    }
  }
  std::vector<std::string> columns{"report", "seed"};
  std::vector<std::vector<std::pair<std::string, std::string>>> rows;
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    for (const auto& m : parsed[i].at("methods")) {
      auto cells = summary_cells(m);
      cells.insert(cells.begin(), {{"report", reports[i].string()}, {"seed", cell(parsed[i].at("seed"))}});
      for (const auto& [k, v] : cells) {
        if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
      }
      rows.push_back(std::move(cells));
    }
  }
  std::string out = join(columns, ",") + "\n";
  for (const auto& row : rows) {
    std::vector<std::string> vals;
    for (const auto& c : columns) {
      const auto it = std::find_if(row.begin(), row.end(), [&](const auto& kv) { return kv.first == c; });
      vals.push_back(it == row.end() ? "" : it->second);
    }
    out += join(vals, ",") + "\n";
  }
  return out;
}

std::string sweep_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const fs::path& out_dir) {
  if (seeds.empty()) throw InvalidArgument("sweep needs at least one seed");
  std::vector<std::string> columns{"seed"};
  std::vector<std::vector<std::pair<std::string, std::string>>> rows;
  std::map<std::string, std::map<std::string, std::vector<double>>> per_method;
  std::vector<std::string> order;
  for (const std::uint64_t s : seeds) {
    ExperimentConfig c = cfg;
    c.seed = s;
    const json report = json::parse(run_experiment(c, out_dir / ("seed-" + std::to_string(s))));
    for (const auto& m : report.at("methods")) {
      auto cells = summary_cells(m);
      cells.insert(cells.begin(), {"seed", std::to_string(s)});
      const std::string name = m.at("name");
      if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
      for (const auto& [k, v] : cells) {
        if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
        if (k != "seed" && k != "name" && k != "method" && !v.empty()) per_method[name][k].push_back(std::stod(v));
      }
      rows.push_back(std::move(cells));
    }
  }
  for (const auto& name : order) {
    std::vector<std::pair<std::string, std::string>> cells{{"seed", "median"}, {"name", name}};
    for (const auto& [k, vals] : per_method[name]) cells.emplace_back(k, format_double(median(vals)));
    rows.push_back(std::move(cells));
  }
  std::string out = join(columns, ",") + "\n";
  for (const auto& row : rows) {
    std::vector<std::string> vals;
    for (const auto& c : columns) {
      const auto it = std::find_if(row.begin(), row.end(), [&](const auto& kv) { return kv.first == c; });
      vals.push_back(it == row.end() ? "" : it->second);
    }
    out += join(vals, ",") + "\n";
  }
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "sweep.csv", out);
  return out;
}

}  // namespace mte::exp
