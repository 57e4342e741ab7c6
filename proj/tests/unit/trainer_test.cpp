// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "mte/error.hpp"
#include "mte/trainer.hpp"
#include "test_util.hpp"

namespace mte::train {
namespace {

data::DatasetSplits blob_splits(std::uint64_t seed) {
  return data::train_val_test_split(testing::separable_blobs(150, seed), {0.6, 0.2, 0.2}, seed);
}

TrainConfig quick(Method m, std::size_t epochs = 30) {
  TrainConfig c;
  c.method = m;
  c.epochs = epochs;
  c.batch_size = 20;
  c.primary_hidden = {16, 16};
  c.aux_hidden = {8};
  c.primary_schedule = {0.1, epochs / 2, 5, 0.5};
  c.seed = 17;
  return c;
}

double acc_of(const nn::ModelCheckpoint& m, const data::LabeledDataset& ds) {
  const std::vector<nn::ModelCheckpoint> one{m};
  return metrics::accuracy(predict(one, ds.features, PredictMode::primary_only()), ds.label_batch());
}

TEST(Trainer, SeparableBlobsReachNearPerfectAccuracy) {
  const auto s = blob_splits(1);
  EXPECT_GE(acc_of(train_single(quick(Method::kCe), s.train, s.val).model, s.test), 0.99);
  const MteResult mte = train_mte(quick(Method::kMte), s.train, s.val);
  EXPECT_GE(acc_of(mte.primary, s.test), 0.99);
  // Two peers at lr 0.1 with momentum 0.9 can diverge on inputs of this scale.
  TrainConfig dml_cfg = quick(Method::kDml);
  dml_cfg.primary_schedule.initial = 0.05;
  const DmlResult dml = train_dml(dml_cfg, s.train, s.val);
  EXPECT_GE(acc_of(dml.models[0], s.test), 0.99);
  EXPECT_GE(acc_of(dml.models[1], s.test), 0.99);
}

TEST(Trainer, TinyCovarianceApproachesBayesAccuracy) {
  data::MixtureSpec spec = data::MixtureSpec::default_spec(2);
  spec.samples_per_class = 200;
  spec.cov_scale.assign(3, 0.05);
  const auto s = data::train_val_test_split(data::make_gaussian_mixture(spec), {0.6, 0.2, 0.2}, 2);
  EXPECT_GE(acc_of(train_single(quick(Method::kCe, 20), s.train, s.val).model, s.test), 0.99);
}

TEST(Trainer, ZeroEpochsReturnsInitialParameters) {
  const auto s = blob_splits(2);
  TrainConfig c = quick(Method::kCe, 0);
  const SingleResult r = train_single(c, s.train, s.val);
  EXPECT_EQ(r.model.params, nn::init_params(c.primary_spec(2, 2)).params);
  EXPECT_TRUE(r.history.epochs.empty());
}

TEST(Trainer, DeterministicAndOneRecordPerEpoch) {
  const auto s = blob_splits(3);
  const MteResult a = train_mte(quick(Method::kMte, 5), s.train, s.val);
  const MteResult b = train_mte(quick(Method::kMte, 5), s.train, s.val);
  EXPECT_EQ(a.primary, b.primary);
  EXPECT_EQ(a.aux, b.aux);
  EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
  EXPECT_EQ(a.history.epochs.size(), 5u);
  EXPECT_EQ(a.primary.meta.epoch, 5u);
}

TEST(Trainer, ZeroAlphaMteFollowsCeTrajectory) {
  const auto s = blob_splits(4);
  TrainConfig mte = quick(Method::kMte, 8);
  mte.alpha = 0.0;
  const MteResult m = train_mte(mte, s.train, s.val);
  const SingleResult ce = train_single(quick(Method::kCe, 8), s.train, s.val);
  EXPECT_EQ(m.primary.params, ce.model.params);
  ASSERT_EQ(m.history.epochs.size(), ce.history.epochs.size());
  for (std::size_t e = 0; e < ce.history.epochs.size(); ++e) {
    EXPECT_EQ(m.history.epochs[e].losses.at("primary.ce"), ce.history.epochs[e].losses.at("primary.ce"));
  }
}

TEST(Trainer, ZeroParameterBaselinesFollowCeTrajectory) {
  const auto s = blob_splits(5);
  const SingleResult ce = train_single(quick(Method::kCe, 6), s.train, s.val);
  for (auto kind : {loss::BaselineKind::kFocal, loss::BaselineKind::kLabelSmoothing, loss::BaselineKind::kEntropyReg}) {
    TrainConfig c = quick(Method::kBaseline, 6);
    c.baseline = {kind, 0.0};
    EXPECT_EQ(train_single(c, s.train, s.val).model.params, ce.model.params) << loss::baseline_kind_name(kind);
  }
}

TEST(Trainer, ZeroAlphaDmlIsTwoIndependentCeRuns) {
  const auto s = blob_splits(6);
  TrainConfig c = quick(Method::kDml, 5);
  c.alpha = 0.0;
  const DmlResult d = train_dml(c, s.train, s.val);
  EXPECT_EQ(d.models[0].params, train_single(quick(Method::kCe, 5), s.train, s.val, 0).model.params);
  EXPECT_EQ(d.models[1].params, train_single(quick(Method::kCe, 5), s.train, s.val, 1).model.params);
}

TEST(Trainer, LossDecompositionRecords) {
  const auto s = blob_splits(7);
  TrainConfig c = quick(Method::kMte, 2);
  c.n_aux = 2;
  const MteResult m = train_mte(c, s.train, s.val);
  EXPECT_EQ(m.aux.size(), 2u);
  const auto& primary_terms = m.history.loss_terms.at("primary");
  EXPECT_EQ(std::count(primary_terms.begin(), primary_terms.end(), "ce"), 1);
  for (const char* aux : {"aux0", "aux1"}) {
    const auto& terms = m.history.loss_terms.at(aux);
    EXPECT_EQ(std::count(terms.begin(), terms.end(), "ce"), 0) << aux;
    EXPECT_EQ(std::count(terms.begin(), terms.end(), "kl"), 1) << aux;
  }
  EXPECT_EQ(m.aux[0].spec.widths, (std::vector<std::size_t>{2, 8, 2}));
  EXPECT_NE(m.aux[0].params, m.aux[1].params);

  const DmlResult d = train_dml(quick(Method::kDml, 2), s.train, s.val);
  for (const char* peer : {"model0", "model1"}) {
    const auto& terms = d.history.loss_terms.at(peer);
    EXPECT_EQ(std::count(terms.begin(), terms.end(), "ce"), 1) << peer;
  }
}

TEST(Trainer, SameSnapshotOrderDiffersFromPrimaryFirst) {
  const auto s = blob_splits(8);
  TrainConfig c = quick(Method::kMte, 3);
  const MteResult a = train_mte(c, s.train, s.val);
  c.update_order = UpdateOrder::kSameSnapshot;
  const MteResult b = train_mte(c, s.train, s.val);
  // Auxiliaries distil from pre-update primary predictions instead.
  EXPECT_NE(a.aux[0].params, b.aux[0].params);
}

TEST(Trainer, DeepEnsembleMembers) {
  const auto s = blob_splits(9);
  TrainConfig c = quick(Method::kDe, 10);
  c.n_aux = 3;
  const EnsembleResult e = train_deep_ensemble(c, s.train, s.val);
  ASSERT_EQ(e.members.size(), 3u);
  EXPECT_NE(e.members[0].params, e.members[1].params);
  EXPECT_NE(e.members[1].params, e.members[2].params);
  EXPECT_NE(e.members[0].params, e.members[2].params);
  EXPECT_EQ(e.members[0].params, train_single(quick(Method::kCe, 10), s.train, s.val).model.params);

  double best = 0.0;
  for (const auto& m : e.members) best = std::max(best, acc_of(m, s.test));
  const double ens = metrics::accuracy(predict(e.members, s.test.features, PredictMode::ensemble()),
                                       s.test.label_batch());
  EXPECT_GE(ens, best - 0.005);
}

TEST(Predict, PrimaryOnlyEvaluatesOneModel) {
  const auto s = blob_splits(10);
  for (std::size_t n_aux : {1u, 2u, 4u}) {
    TrainConfig c = quick(Method::kMte, 1);
    c.n_aux = n_aux;
    const MteResult m = train_mte(c, s.train, s.val);
    std::vector<nn::ModelCheckpoint> all{m.primary};
    all.insert(all.end(), m.aux.begin(), m.aux.end());
    nn::reset_forward_pass_count();
    const loss::ProbBatch p = predict(all, s.test.features, PredictMode::primary_only());
    EXPECT_EQ(nn::forward_pass_count(), 1u);
    EXPECT_EQ(p.size(), s.test.size());
    nn::reset_forward_pass_count();
    predict(all, s.test.features, PredictMode::ensemble());
    EXPECT_EQ(nn::forward_pass_count(), 1u + n_aux);
  }
}

TEST(Predict, EnsembleOfIdenticalModelsIsTheModel) {
  const nn::ModelCheckpoint m = nn::init_params({{3, 5, 4}, 2});
  CounterRng rng(1);
  const Matrix x = testing::random_matrix(6, 3, rng);
  const std::vector<nn::ModelCheckpoint> one{m}, three{m, m, m};
  const auto single = predict(one, x, PredictMode::primary_only());
  const auto ens = predict(three, x, PredictMode::ensemble());
  for (std::size_t i = 0; i < single.probs.size(); ++i) EXPECT_NEAR(ens.probs[i], single.probs[i], 1e-15);
  EXPECT_EQ(ens.predicted, single.predicted);
}

TEST(Predict, UniformEnsembleAveragesSoftmaxes) {
  // Three single-layer nets with zero weights whose biases are the logits.
  const double biases[3][3] = {{0.0, 0.0, 0.0}, {std::log(2.0), 0.0, 0.0}, {0.0, 0.0, std::log(4.0)}};
  std::vector<nn::ModelCheckpoint> members;
  for (const auto& b : biases) {
    nn::ModelCheckpoint c = nn::init_params({{1, 3}, 0});
    c.params = {0.0, 0.0, 0.0, b[0], b[1], b[2]};
    members.push_back(c);
  }
  // softmaxes: (1/3, 1/3, 1/3), (1/2, 1/4, 1/4), (1/6, 1/6, 2/3)
  const auto p = predict(members, Matrix(1, 1, 0.7), PredictMode::ensemble());
  EXPECT_NEAR(p.probs(0, 0), (1.0 / 3 + 1.0 / 2 + 1.0 / 6) / 3, 1e-15);
  EXPECT_NEAR(p.probs(0, 1), (1.0 / 3 + 1.0 / 4 + 1.0 / 6) / 3, 1e-15);
  EXPECT_NEAR(p.probs(0, 2), (1.0 / 3 + 1.0 / 4 + 2.0 / 3) / 3, 1e-15);
  EXPECT_THROW(predict(members, Matrix(1, 1, 0.7), PredictMode::ensemble({0.5, 0.5})), InvalidArgument);
  EXPECT_THROW(predict(std::span<const nn::ModelCheckpoint>{}, Matrix(1, 1), PredictMode::primary_only()),
               InvalidArgument);
  // Weight 1 on a member reproduces it exactly.
  const auto only_last = predict(members, Matrix(1, 1, 0.7), PredictMode::ensemble({0.0, 0.0, 1.0}));
  EXPECT_NEAR(only_last.probs(0, 2), 2.0 / 3.0, 1e-15);
}

TEST(Trainer, DivergenceNamesEpochAndBatch) {
  const auto s = blob_splits(11);
  TrainConfig c = quick(Method::kCe, 3);
  c.primary_schedule = nn::LrSchedule::constant(1e300);
  try {
    train_single(c, s.train, s.val);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
  }
}

TEST(Trainer, RejectsMismatchedInputs) {
  const auto s = blob_splits(12);
  EXPECT_THROW(train_single(quick(Method::kMte), s.train, s.val), InvalidArgument);
  EXPECT_THROW(train_mte(quick(Method::kCe), s.train, s.val), InvalidArgument);
  TrainConfig de = quick(Method::kDe);
  de.n_aux = 1;
  EXPECT_THROW(train_deep_ensemble(de, s.train, s.val), InvalidArgument);
  TrainConfig bad = quick(Method::kMte);
  bad.alpha = -1.0;
  EXPECT_THROW(train_mte(bad, s.train, s.val), InvalidArgument);
  const auto other = data::train_val_test_split(testing::separable_blobs(50, 1, 3), {0.6, 0.2, 0.2}, 1);
  EXPECT_THROW(train_single(quick(Method::kCe), s.train, other.val), InvalidArgument);
}

TEST(TrainHistory, CsvHasOneRowPerEpoch) {
  const auto s = blob_splits(13);
  const MteResult m = train_mte(quick(Method::kMte, 4), s.train, s.val);
  const std::string csv = m.history.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.rfind("epoch,lr,", 0), 0u) << csv;
  EXPECT_NE(csv.find("aux0.kl"), std::string::npos);
  EXPECT_NE(csv.find("val_ece"), std::string::npos);
}

}  // namespace
}  // namespace mte::train
