// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mte/autodiff.hpp"
#include "mte/error.hpp"
#include "mte/losses.hpp"
#include "test_util.hpp"

namespace mte::loss {
namespace {

using ad::NodeId;
using ad::Tape;
using testing::micro_net;
using testing::random_labels;
using testing::random_matrix;
using testing::random_probs;

Matrix log_of(const Matrix& p) {
  Matrix out = p;
  for (double& v : out.data()) v = std::log(v);
  return out;
}

double scalar(const Tape& t, NodeId n) { return t.value(n)[0]; }

// Two-term KL by hand: sum_k p_k log(p_k / q_k), with 0 log 0 = 0.
double kl_reference(std::initializer_list<double> p, std::initializer_list<double> q) {
  double total = 0.0;
  auto qi = q.begin();
  for (double pk : p) {
    if (pk > 0.0) total += pk * std::log(pk / *qi);
    ++qi;
  }
  return total;
}

TEST(CrossEntropy, SpecValues) {
  Tape t;
  const NodeId uniform4 = t.constant(log_of(Matrix::row({0.25, 0.25, 0.25, 0.25})));
  EXPECT_NEAR(scalar(t, cross_entropy(t, uniform4, {{2}, 4})), std::log(4.0), 1e-15);
  const NodeId sure = t.log_softmax(t.constant(Matrix::row({0.0, -1e4})));
  EXPECT_NEAR(scalar(t, cross_entropy(t, sure, {{0}, 2})), 0.0, 1e-15);
  const NodeId half = t.constant(log_of(Matrix::row({0.5, 0.5})));
  EXPECT_NEAR(scalar(t, cross_entropy(t, half, {{0}, 2})), 0.693147, 1e-6);
}

TEST(CrossEntropy, RejectsBadInput) {
  Tape t;
  const NodeId lp = t.constant(log_of(Matrix::row({0.5, 0.5})));
  EXPECT_THROW(cross_entropy(t, lp, {{2}, 2}), InvalidArgument);
  EXPECT_THROW(cross_entropy(t, lp, {{0, 1}, 2}), ShapeError);
  const NodeId not_normalized = t.constant(Matrix::row({0.0, 0.0}));
  EXPECT_THROW(cross_entropy(t, not_normalized, {{0}, 2}), InvalidArgument);
}

TEST(KlDivergence, SpecValues) {
  Tape t;
  const NodeId p = t.constant(Matrix::row({0.9, 0.1}));
  const NodeId q = t.constant(log_of(Matrix::row({0.5, 0.5})));
  EXPECT_NEAR(scalar(t, kl_divergence(t, p, q)), kl_reference({0.9, 0.1}, {0.5, 0.5}), 1e-15);
  EXPECT_NEAR(scalar(t, kl_divergence(t, p, q)), 0.368064, 1e-6);
  const NodeId onehot = t.constant(Matrix::row({1.0, 0.0}));
  EXPECT_NEAR(scalar(t, kl_divergence(t, onehot, q)), std::log(2.0), 1e-15);
  EXPECT_EQ(scalar(t, kl_divergence(t, p, t.constant(log_of(Matrix::row({0.9, 0.1}))))), 0.0);
}

TEST(KlDivergence, NonnegativeOnRandomPairs) {
  CounterRng rng(99);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t k = 2 + rng.below(8);
    Tape t;
    const Matrix p = random_probs(1, k, rng, 2.0);
    const Matrix q = random_probs(1, k, rng, 2.0);
    const double kl = scalar(t, kl_divergence(t, t.constant(p), t.constant(log_of(q))));
    EXPECT_GE(kl, -1e-12);
    const double self = scalar(t, kl_divergence(t, t.constant(p), t.constant(log_of(p))));
    EXPECT_NEAR(self, 0.0, 1e-9);
  }
}

TEST(KlDivergence, RejectsShapeMismatch) {
  Tape t;
  EXPECT_THROW(kl_divergence(t, t.constant(Matrix::row({0.5, 0.5})), t.constant(log_of(Matrix::row({0.2, 0.3, 0.5})))),
               ShapeError);
}

TEST(MtePrimaryLoss, Degenerations) {
  CounterRng rng(4);
  Tape t;
  const NodeId f = t.log_softmax(t.parameter(random_matrix(5, 3, rng)));
  const LabelBatch y = random_labels(5, 3, rng);
  const NodeId g = t.constant(random_probs(5, 3, rng));
  const double ce = scalar(t, cross_entropy(t, f, y));

  const NodeId g_arr[] = {g};
  EXPECT_EQ(scalar(t, mte_primary_loss(t, f, g_arr, y, 0.0).total), ce);

  const NodeId f_copy[] = {t.exp(t.detach(f))};
  EXPECT_NEAR(scalar(t, mte_primary_loss(t, f, f_copy, y, 0.8).total), ce, 1e-15);

  const NodeId three[] = {g, g, g};
  EXPECT_NEAR(scalar(t, mte_primary_loss(t, f, three, y, 0.7).total),
              scalar(t, mte_primary_loss(t, f, g_arr, y, 0.7).total), 1e-15);
}

TEST(MtePrimaryLoss, RejectsEmptyOrTrainableAuxiliaries) {
  CounterRng rng(5);
  Tape t;
  const NodeId f = t.log_softmax(t.parameter(random_matrix(2, 3, rng)));
  const LabelBatch y = random_labels(2, 3, rng);
  EXPECT_THROW(mte_primary_loss(t, f, {}, y, 1.0), InvalidArgument);
  const NodeId live[] = {t.exp(t.log_softmax(t.parameter(random_matrix(2, 3, rng))))};
  EXPECT_THROW(mte_primary_loss(t, f, live, y, 1.0), InvalidArgument);
  const NodeId g[] = {t.constant(random_probs(2, 3, rng))};
  EXPECT_THROW(mte_primary_loss(t, f, g, y, -1.0), InvalidArgument);
}

TEST(MteAuxiliaryLoss, ValuesAndContract) {
  Tape t;
  const NodeId f = t.constant(Matrix::row({0.9, 0.1}));
  const NodeId g = t.log_softmax(t.parameter(log_of(Matrix::row({0.5, 0.5}))));
  const LossParts parts = mte_auxiliary_loss(t, f, g);
  EXPECT_NEAR(scalar(t, parts.total), 0.368064, 1e-6);
  EXPECT_FALSE(parts.has_term("ce"));
  EXPECT_TRUE(parts.has_term("kl"));
  ASSERT_EQ(parts.terms.size(), 1u);

  const NodeId same = t.log_softmax(t.parameter(log_of(Matrix::row({0.9, 0.1}))));
  EXPECT_NEAR(scalar(t, mte_auxiliary_loss(t, f, same).total), 0.0, 1e-15);

  const NodeId live = t.exp(t.log_softmax(t.parameter(Matrix::row({0.3, 0.1}))));
  EXPECT_THROW(mte_auxiliary_loss(t, live, g), InvalidArgument);
  EXPECT_THROW(mte_auxiliary_loss(t, t.constant(Matrix::row({0.2, 0.3, 0.5})), g), ShapeError);
}

TEST(GradientFlow, EachLossReachesOnlyItsOwnModel) {
  CounterRng rng(31);
  Tape t;
  const NodeId x = t.constant(random_matrix(6, 4, rng));
  const auto primary = micro_net(t, x, 4, 5, 3, rng);
  const auto aux = micro_net(t, x, 4, 3, 3, rng);
  const NodeId f_logp = t.log_softmax(primary.logits);
  const NodeId g_logp = t.log_softmax(aux.logits);
  const LabelBatch y = random_labels(6, 3, rng);

  const NodeId g_detached[] = {t.exp(t.detach(g_logp))};
  const LossParts lf = mte_primary_loss(t, f_logp, g_detached, y, 0.9);
  const LossParts lg = mte_auxiliary_loss(t, t.exp(t.detach(f_logp)), g_logp);
  const ad::Gradients gf = t.backward(lf.total);
  const ad::Gradients gg = t.backward(lg.total);
  for (NodeId p : {aux.w0, aux.b0, aux.w1, aux.b1}) {
    for (double v : gf.at(p).data()) EXPECT_EQ(v, 0.0);
  }
  for (NodeId p : {primary.w0, primary.b0, primary.w1, primary.b1}) {
    for (double v : gg.at(p).data()) EXPECT_EQ(v, 0.0);
  }
  double nonzero = 0.0;
  for (double v : gf.at(primary.w1).data()) nonzero += std::abs(v);
  EXPECT_GT(nonzero, 0.0);
}

TEST(DmlLoss, SpecValuesAndTerms) {
  Tape t;
  const NodeId own = t.log_softmax(t.parameter(log_of(Matrix::row({0.5, 0.5}))));
  const NodeId peer = t.constant(Matrix::row({0.9, 0.1}));
  const LossParts parts = dml_loss(t, own, peer, {{0}, 2}, 1.0);
  EXPECT_NEAR(scalar(t, parts.total), std::log(2.0) + kl_reference({0.9, 0.1}, {0.5, 0.5}), 1e-15);
  EXPECT_NEAR(scalar(t, parts.total), 1.061211, 1e-6);
  EXPECT_TRUE(parts.has_term("ce"));
  EXPECT_TRUE(parts.has_term("kl"));
  EXPECT_NEAR(scalar(t, dml_loss(t, own, peer, {{0}, 2}, 0.0).total), std::log(2.0), 1e-15);
  const NodeId self = t.constant(Matrix::row({0.5, 0.5}));
  EXPECT_NEAR(scalar(t, dml_loss(t, own, self, {{0}, 2}, 1.0).total), std::log(2.0), 1e-15);
}

TEST(EnsembleProbs, EndpointsAndMidpoint) {
  const ProbBatch f = ProbBatch::from_probs(Matrix::row({0.8, 0.2}));
  const ProbBatch g = ProbBatch::from_probs(Matrix::row({0.4, 0.6}));
  const ProbBatch members[] = {f, g};
  const double w0[] = {1.0, 0.0}, w1[] = {0.0, 1.0}, half[] = {0.5, 0.5};
  EXPECT_EQ(ensemble_probs(members, w0).probs, f.probs);
  EXPECT_EQ(ensemble_probs(members, w1).probs, g.probs);
  const ProbBatch mid = ensemble_probs(members, half);
  EXPECT_NEAR(mid.probs[0], 0.6, 1e-15);
  EXPECT_NEAR(mid.probs[1], 0.4, 1e-15);
  const double bad[] = {0.5, 0.6};
  EXPECT_THROW(ensemble_probs(members, bad), InvalidArgument);
}

TEST(EnsembleProbs, ArgmaxInvariantUnderWeightRescaling) {
  CounterRng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbBatch members[] = {ProbBatch::from_probs(random_probs(10, 4, rng)),
                                 ProbBatch::from_probs(random_probs(10, 4, rng)),
                                 ProbBatch::from_probs(random_probs(10, 4, rng))};
    const double raw[] = {rng.uniform() + 0.1, rng.uniform() + 0.1, rng.uniform() + 0.1};
    const double c = 0.5 + 3.0 * rng.uniform();
    std::vector<double> w1, w2;
    double s1 = 0.0, s2 = 0.0;
    for (double v : raw) {
      s1 += v;
      s2 += c * v;
    }
    for (double v : raw) {
      w1.push_back(v / s1);
      w2.push_back(c * v / s2);
    }
    EXPECT_EQ(ensemble_probs(members, w1).predicted, ensemble_probs(members, w2).predicted);
  }
}

TEST(ProbBatch, ConfidenceAndTieBreaking) {
  const ProbBatch p = ProbBatch::from_probs(Matrix(2, 3, {0.25, 0.5, 0.25, 0.4, 0.2, 0.4}));
  EXPECT_EQ(p.confidence, (std::vector<double>{0.5, 0.4}));
  EXPECT_EQ(p.predicted, (std::vector<std::size_t>{1, 0}));
  EXPECT_THROW(ProbBatch::from_probs(Matrix::row({0.5, 0.6})), InvalidArgument);
  EXPECT_THROW(ProbBatch::from_probs(Matrix::row({1.5, -0.5})), InvalidArgument);
}

TEST(LabelBatch, OneHot) {
  const LabelBatch y{{2, 0}, 3};
  EXPECT_EQ(y.one_hot(), Matrix(2, 3, {0, 0, 1, 1, 0, 0}));
  EXPECT_THROW((LabelBatch{{3}, 3}).validate(), InvalidArgument);
}

TEST(BaselineLoss, ZeroParameterEqualsCrossEntropy) {
  CounterRng rng(12);
  for (const auto kind : {BaselineKind::kFocal, BaselineKind::kLabelSmoothing, BaselineKind::kEntropyReg}) {
    Tape t;
    const NodeId z = t.parameter(random_matrix(7, 4, rng));
    const NodeId lp = t.log_softmax(z);
    const LabelBatch y = random_labels(7, 4, rng);
    const NodeId ce = cross_entropy(t, lp, y);
    const LossParts b = baseline_loss(t, {kind, 0.0}, lp, y);
    EXPECT_EQ(scalar(t, b.total), scalar(t, ce)) << baseline_kind_name(kind);
    EXPECT_EQ(t.backward(b.total).at(z), t.backward(ce).at(z)) << baseline_kind_name(kind);
  }
}

TEST(BaselineLoss, ClosedForms) {
  Tape t;
  const NodeId lp = t.constant(log_of(Matrix::row({0.7, 0.2, 0.1})));
  const LabelBatch y{{0}, 3};
  EXPECT_NEAR(scalar(t, baseline_loss(t, {BaselineKind::kFocal, 2.0}, lp, y).total),
              -std::pow(0.3, 2.0) * std::log(0.7), 1e-14);
  const double eps = 0.1;
  const double ls = -((1 - eps + eps / 3) * std::log(0.7) + eps / 3 * std::log(0.2) + eps / 3 * std::log(0.1));
  EXPECT_NEAR(scalar(t, baseline_loss(t, {BaselineKind::kLabelSmoothing, eps}, lp, y).total), ls, 1e-14);
  const double h = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1));
  EXPECT_NEAR(scalar(t, baseline_loss(t, {BaselineKind::kEntropyReg, 0.3}, lp, y).total), -std::log(0.7) - 0.3 * h,
              1e-14);
}

TEST(BaselineLoss, RejectsInvalidParameters) {
  Tape t;
  const NodeId lp = t.constant(log_of(Matrix::row({0.5, 0.5})));
  EXPECT_THROW(baseline_loss(t, {BaselineKind::kFocal, -1.0}, lp, {{0}, 2}), InvalidArgument);
  EXPECT_THROW(baseline_loss(t, {BaselineKind::kLabelSmoothing, 1.0}, lp, {{0}, 2}), InvalidArgument);
  EXPECT_THROW(parse_baseline_kind("hinge"), InvalidArgument);
  EXPECT_EQ(parse_baseline_kind("label-smoothing"), BaselineKind::kLabelSmoothing);
}

// Every objective against central finite differences on a random micro-net.
TEST(FiniteDifference, AllLosses) {
  CounterRng rng(77);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t k = trial % 2 ? 3 : 5;
    auto build = [&](auto make) {
      Tape t;
      const NodeId x = t.constant(random_matrix(6, 3, rng));
      const auto net = micro_net(t, x, 3, 4, k, rng);
      const NodeId lp = t.log_softmax(net.logits);
      const LabelBatch y = random_labels(6, k, rng);
      const NodeId loss = make(t, lp, y);
      return check_gradients_fd(t, loss, 1e-6);
    };
    const Matrix soft = random_probs(6, k, rng);
    const Matrix soft2 = random_probs(6, k, rng);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch& y) { return cross_entropy(t, lp, y); }), 1e-5);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch&) { return kl_divergence(t, t.constant(soft), lp); }),
              1e-5);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch&) { return kl_divergence(t, t.exp(lp), t.constant(log_of(soft))); }),
              1e-5);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch& y) {
                const NodeId g[] = {t.constant(soft), t.constant(soft2)};
                return mte_primary_loss(t, lp, g, y, 0.8).total;
              }),
              1e-5);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch&) {
                return mte_auxiliary_loss(t, t.constant(soft), lp).total;
              }),
              1e-5);
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch& y) {
                return dml_loss(t, lp, t.constant(soft), y, 0.6).total;
              }),
              1e-5);
    for (const BaselineLossSpec spec : {BaselineLossSpec{BaselineKind::kFocal, 2.0},
                                        BaselineLossSpec{BaselineKind::kLabelSmoothing, 0.1},
                                        BaselineLossSpec{BaselineKind::kEntropyReg, 0.2}}) {
      EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch& y) { return baseline_loss(t, spec, lp, y).total; }),
                1e-5)
          << baseline_kind_name(spec.kind);
    }
    EXPECT_LE(build([&](Tape& t, NodeId lp, const LabelBatch&) {
                const NodeId parts[] = {t.exp(lp), t.constant(soft)};
                const double w[] = {0.3, 0.7};
                return t.sum(t.mul(mix_probs(t, parts, w), t.constant(soft2)));
              }),
              1e-5);
  }
}

// Gradient of KL(h || f) with h = (1 - beta) stopgrad(f) + beta g equals beta times the gradient of KL(g || f).
TEST(MixtureKl, GradientScalesByBeta) {
  CounterRng rng(2024);
  for (const double beta : {0.1, 0.5, 0.9}) {
    Tape t;
    const NodeId x = t.constant(random_matrix(8, 4, rng));
    const auto primary = micro_net(t, x, 4, 6, 3, rng);
    const auto aux = micro_net(t, x, 4, 5, 3, rng);
    const NodeId f_logp = t.log_softmax(primary.logits);
    const NodeId g = t.exp(t.log_softmax(aux.logits));
    const NodeId parts[] = {t.exp(t.detach(f_logp)), g};
    const double w[] = {1.0 - beta, beta};
    const NodeId h = mix_probs(t, parts, w);
    const ad::Gradients lhs = t.backward(kl_divergence(t, h, f_logp));
    const ad::Gradients rhs = t.backward(kl_divergence(t, g, f_logp));
    for (NodeId p : {primary.w0, primary.b0, primary.w1, primary.b1}) {
      for (std::size_t i = 0; i < lhs.at(p).size(); ++i) {
        const double a = lhs.at(p)[i];
        const double b = beta * rhs.at(p)[i];
        EXPECT_LE(std::abs(a - b), 1e-8 * std::max(std::abs(a), std::abs(b)) + 1e-15) << "beta " << beta;
      }
    }
  }
}

}  // namespace
}  // namespace mte::loss
