// SPDX-License-Identifier: Apache-2.0
#include "mte/trainer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "mte/error.hpp"
#include "mte/io.hpp"
#include "mte/rng.hpp"

namespace mte::train {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kShuffleStream = 0;

std::vector<std::size_t> with_ends(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

void check_datasets(const data::LabeledDataset& train, const data::LabeledDataset& val) {
  train.validate();
  val.validate();
  if (train.size() == 0) throw InvalidArgument("training set is empty");
  if (train.num_classes != val.num_classes && val.size() > 0) {
    throw InvalidArgument("train and validation sets disagree on K (" + std::to_string(train.num_classes) + " vs " +
                          std::to_string(val.num_classes) + ")");
  }
  if (val.size() > 0 && train.dim() != val.dim()) {
    throw InvalidArgument("train and validation sets disagree on feature dim");
  }
}

// One gradient step of `model` on the loss built by `make_loss` from its log-probabilities.
// Returns the recorded term values; adds a "total" entry when the total is not itself a term.
using LossBuilder = std::function<loss::LossParts(ad::Tape&, ad::NodeId logp)>;

struct StepOutcome {
  std::vector<std::pair<std::string, double>> values;
  std::vector<std::string> term_names;
};

StepOutcome sgd_on_loss(nn::ModelCheckpoint& model, nn::OptState& opt, const Matrix& x, const LossBuilder& make_loss,
                        std::size_t epoch, std::size_t batch, const std::string& who) {
  ad::Tape tape;
  const nn::TapeModel tm = nn::bind_parameters(tape, model);
  const ad::NodeId input = tape.constant(x);
  const ad::NodeId logp = tape.log_softmax(nn::build_logits(tape, tm, input));
  const loss::LossParts parts = make_loss(tape, logp);
  const double total = tape.value(parts.total)[0];
  if (!std::isfinite(total)) {
    throw DivergenceError(who + " loss is " + format_double(total) + " at epoch " + std::to_string(epoch) +
                          ", batch " + std::to_string(batch));
  }
  const ad::Gradients grads = tape.backward(parts.total);
  const std::vector<double> flat = nn::flatten_gradients(grads, tm, model.spec);
  try {
    nn::sgd_step(model, flat, opt);
  } catch (const DivergenceError& e) {
    throw DivergenceError(who + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " +
                          e.what());
  }
  StepOutcome out;
  out.values.emplace_back("total", total);
  for (const auto& t : parts.terms) {
    out.values.emplace_back(t.name, tape.value(t.node)[0]);
    out.term_names.push_back(t.name);
  }
  return out;
}

Matrix softmax_of(const nn::ModelCheckpoint& model, const Matrix& x) {
  Matrix p = ad::log_softmax_rows(nn::forward_logits(model, x));
  for (double& v : p.data()) v = std::exp(v);
  return p;
}

// Per-epoch bookkeeping shared by every loop.
class EpochAccumulator {
 public:
  void add(const std::string& model, const StepOutcome& step) {
    for (const auto& [name, value] : step.values) sums_[model + "." + name] += value;
  }
  void finish_batch() { ++batches_; }
  std::map<std::string, double> means() const {
    std::map<std::string, double> out;
    for (const auto& [k, v] : sums_) out[k] = v / static_cast<double>(batches_);
    return out;
  }

 private:
  std::map<std::string, double> sums_;
  std::size_t batches_ = 0;
};

// Drives epochs and shared mini-batches; `step` trains every model on one batch.
void run_epochs(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val,
                const std::function<void(std::size_t epoch)>& set_lr,
                const std::function<void(const Matrix& x, const loss::LabelBatch& y, std::size_t epoch,
                                         std::size_t batch, EpochAccumulator& acc)>& step,
                const nn::ModelCheckpoint& monitored, TrainHistory& history,
                const std::function<void(std::size_t epoch)>& stamp) {
  const std::uint64_t shuffle_key = derive_key(cfg.seed, kShuffleStream);
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(derive_key(shuffle_key, epoch));
    shuffle(order, rng);
    set_lr(epoch);
    EpochAccumulator acc;
    std::size_t batch = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch) {
      const std::size_t last = std::min(order.size(), first + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + first, last - first);
      const Matrix x = gather_rows(train.features, rows);
      loss::LabelBatch y{{}, train.num_classes};
      y.labels.reserve(rows.size());
      for (std::size_t r : rows) y.labels.push_back(train.labels[r]);
      step(x, y, epoch, batch, acc);
      acc.finish_batch();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at_epoch(cfg.primary_schedule, epoch);
    rec.losses = acc.means();
    if (val.size() > 0) {
      const loss::ProbBatch probs = loss::ProbBatch::from_probs(softmax_of(monitored, val.features));
      const loss::LabelBatch labels = val.label_batch();
      rec.val_accuracy = metrics::accuracy(probs, labels);
      rec.val_ece = metrics::ece(probs, labels, cfg.ece_bins).value;
    }
    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    history.epochs.push_back(std::move(rec));
    stamp(epoch + 1);
  }
}

void stamp_meta(nn::ModelCheckpoint& m, const TrainConfig& cfg, std::size_t epoch) {
  m.meta.config_digest = cfg.config_digest;
  m.meta.epoch = epoch;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::kCe: return "ce";
    case Method::kBaseline: return "baseline";
    case Method::kMte: return "mte";
    case Method::kDml: return "dml";
    case Method::kDe: return "de";
  }
  return "ce";
}

Method parse_method(std::string_view name) {
  if (name == "ce") return Method::kCe;
  if (name == "baseline") return Method::kBaseline;
  if (name == "mte") return Method::kMte;
  if (name == "dml") return Method::kDml;
  if (name == "de") return Method::kDe;
  throw InvalidArgument("unknown method '" + std::string(name) + "' (expected ce, baseline, mte, dml or de)");
}

std::string update_order_name(UpdateOrder order) {
  return order == UpdateOrder::kPrimaryFirst ? "primary-first" : "same-snapshot";
}

UpdateOrder parse_update_order(std::string_view name) {
  if (name == "primary-first") return UpdateOrder::kPrimaryFirst;
  if (name == "same-snapshot") return UpdateOrder::kSameSnapshot;
  throw InvalidArgument("unknown update order '" + std::string(name) + "' (expected primary-first or same-snapshot)");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be a finite value >= 0");
  if (method == Method::kMte && n_aux < 1) throw InvalidArgument("mte needs n_aux >= 1");
  if (method == Method::kDe && n_aux < 2) throw InvalidArgument("de needs n_aux >= 2 members");
  if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  for (std::size_t w : primary_hidden) {
    if (w == 0) throw InvalidArgument("hidden widths must be >= 1");
  }
  for (std::size_t w : aux_hidden) {
    if (w == 0) throw InvalidArgument("hidden widths must be >= 1");
  }
  primary_schedule.validate();
  aux_schedule.validate();
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw InvalidArgument("weight_decay must be >= 0");
  if (ece_bins < 1) throw InvalidArgument("ece_bins must be >= 1");
  if (method == Method::kBaseline) baseline.validate();
}

std::uint64_t model_init_seed(std::uint64_t seed, std::size_t model_index) { return derive_key(seed, 1 + model_index); }

nn::ModelSpec TrainConfig::primary_spec(std::size_t input_dim, std::size_t num_classes,
                                        std::size_t model_index) const {
  return {with_ends(input_dim, primary_hidden, num_classes), model_init_seed(seed, model_index)};
}

nn::ModelSpec TrainConfig::aux_spec(std::size_t input_dim, std::size_t num_classes, std::size_t model_index) const {
  return {with_ends(input_dim, aux_hidden, num_classes), model_init_seed(seed, model_index)};
}

std::string TrainHistory::to_csv() const {
  std::vector<std::string> keys;
  for (const auto& rec : epochs) {
    for (const auto& [k, v] : rec.losses) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  }
  std::sort(keys.begin(), keys.end());
  std::string out = "epoch,lr";
  for (const auto& k : keys) out += "," + k;
  out += ",val_acc,val_ece\n";
  for (const auto& rec : epochs) {
    out += std::to_string(rec.epoch) + "," + format_double(rec.lr);
    for (const auto& k : keys) {
      const auto it = rec.losses.find(k);
      out += "," + (it == rec.losses.end() ? std::string() : format_double(it->second));
    }
    out += "," + format_double(rec.val_accuracy) + "," + format_double(rec.val_ece) + "\n";
  }
  return out;
}

SingleResult train_single(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val,
                          std::size_t model_index) {
  cfg.validate();
  if (cfg.method != Method::kCe && cfg.method != Method::kBaseline) {
    throw InvalidArgument("train_single needs method ce or baseline, got " + method_name(cfg.method));
  }
  check_datasets(train, val);
  const loss::BaselineLossSpec spec =
      cfg.method == Method::kBaseline ? cfg.baseline : loss::BaselineLossSpec{loss::BaselineKind::kCrossEntropy, 0.0};

  SingleResult res;
  res.model = nn::init_params(cfg.primary_spec(train.dim(), train.num_classes, model_index));
  stamp_meta(res.model, cfg, 0);
  nn::OptState opt = nn::make_opt_state(res.model, cfg.primary_schedule.initial, cfg.momentum, cfg.weight_decay);

  run_epochs(
      cfg, train, val, [&](std::size_t e) { opt.lr = lr_at_epoch(cfg.primary_schedule, e); },
      [&](const Matrix& x, const loss::LabelBatch& y, std::size_t epoch, std::size_t batch, EpochAccumulator& acc) {
        const StepOutcome s = sgd_on_loss(
            res.model, opt, x,
            [&](ad::Tape& tape, ad::NodeId logp) { return loss::baseline_loss(tape, spec, logp, y); }, epoch, batch,
            "model");
        if (res.history.loss_terms.empty()) res.history.loss_terms["primary"] = s.term_names;
        acc.add("primary", s);
      },
      res.model, res.history, [&](std::size_t e) { stamp_meta(res.model, cfg, e); });
  return res;
}

MteResult train_mte(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val) {
  cfg.validate();
  if (cfg.method != Method::kMte) throw InvalidArgument("train_mte needs method mte, got " + method_name(cfg.method));
  check_datasets(train, val);
  const std::size_t d = train.dim(), k = train.num_classes;

  MteResult res;
  res.primary = nn::init_params(cfg.primary_spec(d, k, 0));
  stamp_meta(res.primary, cfg, 0);
  std::vector<nn::OptState> aux_opt;
  for (std::size_t i = 0; i < cfg.n_aux; ++i) {
    res.aux.push_back(nn::init_params(cfg.aux_spec(d, k, 1 + i)));
    stamp_meta(res.aux.back(), cfg, 0);
    aux_opt.push_back(nn::make_opt_state(res.aux.back(), cfg.aux_schedule.initial, cfg.momentum, cfg.weight_decay));
  }
  nn::OptState opt = nn::make_opt_state(res.primary, cfg.primary_schedule.initial, cfg.momentum, cfg.weight_decay);

  auto aux_name = [](std::size_t i) { return "aux" + std::to_string(i); };

  run_epochs(
      cfg, train, val,
      [&](std::size_t e) {
        opt.lr = lr_at_epoch(cfg.primary_schedule, e);
        for (auto& o : aux_opt) o.lr = lr_at_epoch(cfg.aux_schedule, e);
      },
      [&](const Matrix& x, const loss::LabelBatch& y, std::size_t epoch, std::size_t batch, EpochAccumulator& acc) {
        std::vector<Matrix> g;
        g.reserve(res.aux.size());
        for (const auto& a : res.aux) g.push_back(softmax_of(a, x));
        Matrix f_before;
        if (cfg.update_order == UpdateOrder::kSameSnapshot) f_before = softmax_of(res.primary, x);

        const StepOutcome ps = sgd_on_loss(
            res.primary, opt, x,
            [&](ad::Tape& tape, ad::NodeId logp) {
              std::vector<ad::NodeId> aux_nodes;
              for (const auto& gi : g) aux_nodes.push_back(tape.constant(gi));
              return loss::mte_primary_loss(tape, logp, aux_nodes, y, cfg.alpha);
            },
            epoch, batch, "primary");
        acc.add("primary", ps);
        if (res.history.loss_terms.empty()) res.history.loss_terms["primary"] = ps.term_names;

        const Matrix f = cfg.update_order == UpdateOrder::kSameSnapshot ? f_before : softmax_of(res.primary, x);
        for (std::size_t i = 0; i < res.aux.size(); ++i) {
          const StepOutcome as = sgd_on_loss(
              res.aux[i], aux_opt[i], x,
              [&](ad::Tape& tape, ad::NodeId logp) {
                return loss::mte_auxiliary_loss(tape, tape.constant(f), logp);
              },
              epoch, batch, aux_name(i));
          acc.add(aux_name(i), as);
          res.history.loss_terms.try_emplace(aux_name(i), as.term_names);
        }
      },
      res.primary, res.history,
      [&](std::size_t e) {
        stamp_meta(res.primary, cfg, e);
        for (auto& a : res.aux) stamp_meta(a, cfg, e);
      });
  return res;
}

DmlResult train_dml(const TrainConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val) {
  cfg.validate();
  if (cfg.method != Method::kDml) throw InvalidArgument("train_dml needs method dml, got " + method_name(cfg.method));
  check_datasets(train, val);
  const std::size_t d = train.dim(), k = train.num_classes;

  DmlResult res;
  std::vector<nn::OptState> opts;
  for (std::size_t j = 0; j < 2; ++j) {
    res.models.push_back(nn::init_params(cfg.primary_spec(d, k, j)));
    stamp_meta(res.models.back(), cfg, 0);
    opts.push_back(nn::make_opt_state(res.models.back(), cfg.primary_schedule.initial, cfg.momentum,
                                      cfg.weight_decay));
  }
  auto name = [](std::size_t j) { return "model" + std::to_string(j); };

  run_epochs(
      cfg, train, val,
      [&](std::size_t e) {
        for (auto& o : opts) o.lr = lr_at_epoch(cfg.primary_schedule, e);
      },
      [&](const Matrix& x, const loss::LabelBatch& y, std::size_t epoch, std::size_t batch, EpochAccumulator& acc) {
        const Matrix p[2] = {softmax_of(res.models[0], x), softmax_of(res.models[1], x)};
        for (std::size_t j = 0; j < 2; ++j) {
          const Matrix& peer = p[1 - j];
          const StepOutcome s = sgd_on_loss(
              res.models[j], opts[j], x,
              [&](ad::Tape& tape, ad::NodeId logp) {
                return loss::dml_loss(tape, logp, tape.constant(peer), y, cfg.alpha);
              },
              epoch, batch, name(j));
          acc.add(name(j), s);
          res.history.loss_terms.try_emplace(name(j), s.term_names);
        }
      },
      res.models[0], res.history,
      [&](std::size_t e) {
        for (auto& m : res.models) stamp_meta(m, cfg, e);
      });
  return res;
}

EnsembleResult train_deep_ensemble(const TrainConfig& cfg, const data::LabeledDataset& train,
                                   const data::LabeledDataset& val) {
  cfg.validate();
  if (cfg.method != Method::kDe) throw InvalidArgument("train_deep_ensemble needs method de, got " + method_name(cfg.method));
  EnsembleResult res;
  for (std::size_t j = 0; j < cfg.n_aux; ++j) {
    TrainConfig member = cfg;
    member.method = Method::kCe;
    member.seed = cfg.seed + j;
    SingleResult r = train_single(member, train, val);
    res.members.push_back(std::move(r.model));
    res.histories.push_back(std::move(r.history));
  }
  return res;
}

loss::ProbBatch predict(std::span<const nn::ModelCheckpoint> ckpts, const Matrix& batch, const PredictMode& mode) {
  if (ckpts.empty()) throw InvalidArgument("predict needs at least one checkpoint");
  if (mode.kind == PredictMode::Kind::kPrimaryOnly) {
    return loss::ProbBatch::from_logits(nn::forward_logits(ckpts[0], batch));
  }
  const std::vector<double> weights = mode.weights.empty() ? loss::uniform_weights(ckpts.size()) : mode.weights;
  if (weights.size() != ckpts.size()) {
    throw InvalidArgument("ensemble has " + std::to_string(ckpts.size()) + " checkpoints but " +
                          std::to_string(weights.size()) + " weights");
  }
  std::vector<loss::ProbBatch> members;
  members.reserve(ckpts.size());
  for (const auto& c : ckpts) members.push_back(loss::ProbBatch::from_logits(nn::forward_logits(c, batch)));
  return loss::ensemble_probs(members, weights);
}

}  // namespace mte::train
