#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "memo.hpp"
#include "oracle.hpp"

using namespace memo;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.hidden_sizes = {4};
  c.learning_rate = 0.3;
  c.momentum = 0.5;
  c.batch_size = 3;
  c.epochs = 1;
  c.seed = 11;
  return c;
}

/// Raw d L_t / dX at the last probe.
Tensor unrolled_gradient(const Dataset& d, const TrainConfig& cfg, std::size_t T, Retention mode, std::size_t interval = 0) {
  Tensor out;
  const auto labels = d.labels();
  UnrollOptions opts;
  opts.retention = mode;
  opts.checkpoint_interval = interval;
  unroll_input_gradients(
      d, cfg, T, {T}, opts,
      [&](const std::vector<Var>& p, const Var& X) { return std::vector<Var>{dataset_loss(p, X, labels)}; },
      [&](std::size_t, std::size_t, const Tensor& g) { out = g; });
  return out;
}

/// Linear softmax classifier: d/dx_i mean CE = W^T (softmax(W x_i + b) - e_y) / N.
Tensor softmax_regression_input_gradient(const MLPParams& p, const Dataset& d) {
  const Tensor& W = p.weight(0);
  const std::size_t k = W.dim(0), n = W.dim(1), N = d.size();
  Tensor g(Shape{N, n});
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> z(k);
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = p.bias(0).data()[c];
      for (std::size_t j = 0; j < n; ++j) z[c] += W.at(c, j) * d.examples[i].input[j];
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double& v : z) s += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < k; ++c) {
      const double r = z[c] / s - (c == d.examples[i].effective_label ? 1.0 : 0.0);
      for (std::size_t j = 0; j < n; ++j) g.at(i, j) += W.at(c, j) * r / static_cast<double>(N);
    }
  }
  return g;
}

}  // namespace

TEST(Norm, KindsAndOrdering) {
  const std::vector<double> v{3.0, -4.0, 0.0};
  EXPECT_EQ(norm(v, NormKind::l1), 7.0);
  EXPECT_EQ(norm(v, NormKind::l2), 5.0);
  EXPECT_EQ(norm(v, NormKind::linf), 4.0);
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const Tensor t = oracle::random_tensor({13}, rng);
    EXPECT_LE(norm(t.data(), NormKind::linf), norm(t.data(), NormKind::l2) + 1e-15);
    EXPECT_LE(norm(t.data(), NormKind::l2), norm(t.data(), NormKind::l1) + 1e-15);
  }
  EXPECT_EQ(parse_norm_kind("l2"), NormKind::l2);
  EXPECT_THROW(parse_norm_kind("l3"), ArgumentError);
}

TEST(ProbeSteps, DefaultCadenceIncludesT) {
  EXPECT_EQ(default_probe_steps(30), (std::vector<std::size_t>{10, 20, 30}));
  EXPECT_EQ(default_probe_steps(25), (std::vector<std::size_t>{10, 20, 25}));
  EXPECT_EQ(default_probe_steps(4), (std::vector<std::size_t>{4}));
}

TEST(Unroll, ZeroLearningRateReducesToInputGradientAtInit) {
  Dataset d = oracle::synthetic(9, 5, 3, 2);
  TrainConfig c = tiny_config();
  c.hidden_sizes = {};
  c.learning_rate = 0.0;
  const Tensor got = unrolled_gradient(d, c, 6, Retention::full);
  const Tensor ref = softmax_regression_input_gradient(init_params({}, 5, 3, c.seed), d);
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got.data()[k], ref.data()[k], 1e-15);
}

TEST(Unroll, OneStepMatchesFiniteDifference) {
  const Dataset d = oracle::synthetic(6, 3, 2, 3);
  TrainConfig c = tiny_config();
  c.batch_size = 6;
  const Tensor got = unrolled_gradient(d, c, 1, Retention::full);
  const Tensor ref = oracle::fd_input_gradient(d, c, 1);
  for (std::size_t k = 0; k < got.size(); ++k) EXPECT_LT(oracle::rel_err(got.data()[k], ref.data()[k]), 1e-5) << k;
}

TEST(Unroll, SeveralStepsMatchFiniteDifference) {
  const Dataset d = oracle::synthetic(6, 3, 2, 4);
  TrainConfig c = tiny_config();
  c.regularizer = RegularizerSpec::make_weight_decay(0.1);
  c.lr_halving_epochs = 1;
  const Tensor ref = oracle::fd_input_gradient(d, c, 5);
  for (auto mode : {Retention::full, Retention::checkpointed}) {
    const Tensor got = unrolled_gradient(d, c, 5, mode, 2);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_LT(oracle::rel_err(got.data()[k], ref.data()[k]), 1e-5) << k;
  }
}

TEST(Unroll, CheckpointedAgreesWithFullRetention) {
  const Dataset d = oracle::synthetic(10, 4, 3, 5);
  TrainConfig c = tiny_config();
  c.hidden_sizes = {5, 5};
  const std::vector<std::size_t> probes{2, 5, 9, 12};
  auto run = [&](Retention r, std::size_t k) {
    UnrollOptions o;
    o.retention = r;
    o.checkpoint_interval = k;
    return unrolled_loss_sensitivity(d, c, 12, probes, NormKind::l1, o);
  };
  const auto full = run(Retention::full, 0);
  for (std::size_t k : {1, 3, 4, 12, 20}) {
    const auto ck = run(Retention::checkpointed, k);
    for (std::size_t p = 0; p < probes.size(); ++p)
      for (std::size_t i = 0; i < d.size(); ++i)
        EXPECT_NEAR(ck.per_step[p][i], full.per_step[p][i], 1e-12 * std::max(1.0, full.per_step[p][i])) << k;
  }
}

TEST(Unroll, TinyBudgetSelectsCheckpointing) {
  const Dataset d = oracle::synthetic(10, 4, 3, 5);
  TrainConfig c = tiny_config();
  UnrollOptions o;
  o.memory_budget_bytes = 1;
  const auto a = unrolled_loss_sensitivity(d, c, 8, {4, 8}, NormKind::l2, o);
  const auto b = unrolled_loss_sensitivity(d, c, 8, {4, 8}, NormKind::l2);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(a.per_step[p][i], b.per_step[p][i], 1e-12);
}

TEST(Unroll, RejectsBadArguments) {
  const Dataset d = oracle::synthetic(6, 3, 2, 3);
  TrainConfig c = tiny_config();
  EXPECT_THROW(unrolled_loss_sensitivity(d, c, 0), ArgumentError);
  EXPECT_THROW(unrolled_loss_sensitivity(d, c, 5, {3, 2}), ArgumentError);
  EXPECT_THROW(unrolled_loss_sensitivity(d, c, 5, {6}), ArgumentError);
  c.regularizer = RegularizerSpec::make_dropout(0.2);
  EXPECT_THROW(unrolled_loss_sensitivity(d, c, 5), ArgumentError);
}

TEST(Unroll, SensitivityIsNormOfGradientRows) {
  const Dataset d = oracle::synthetic(6, 3, 2, 3);
  const TrainConfig c = tiny_config();
  const Tensor g = unrolled_gradient(d, c, 4, Retention::full);
  for (auto kind : {NormKind::l1, NormKind::l2, NormKind::linf}) {
    const auto rec = unrolled_loss_sensitivity(d, c, 4, {4}, kind);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(rec.per_step[0][i], norm(g.row(i), kind));
    EXPECT_EQ(rec.mean_per_example, rec.per_step[0]);
  }
}

TEST(Gini, ClosedForms) {
  EXPECT_EQ(gini({5.0, 5.0, 5.0, 5.0}), 0.0);
  for (std::size_t n : {2, 3, 10, 1000}) {
    std::vector<double> v(n, 0.0);
    v[n / 2] = 3.0;
    EXPECT_NEAR(gini(v), (n - 1.0) / n, 1e-15) << n;
  }
  EXPECT_NEAR(gini({1.0, 2.0, 3.0}), 2.0 / 9.0, 1e-15);
}

TEST(Gini, MatchesPairwiseDefinition) {
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(0.0, 10.0);
    double pair = 0, total = 0;
    for (double a : v) {
      total += a;
      for (double b : v) pair += std::abs(a - b);
    }
    const double ref = pair / (2.0 * n * total);
    EXPECT_NEAR(gini(v), ref, 1e-12);
  }
}

TEST(Gini, InvariancesAndRange) {
  Rng rng(4);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.bernoulli(0.2) ? 0.0 : rng.uniform(0.0, 5.0);
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) v[0] = 1.0;
    const double g = gini(v);
    EXPECT_GE(g, 0.0);
    EXPECT_LE(g, 1.0 - 1.0 / n + 1e-15);
    auto w = v;
    std::shuffle(w.begin(), w.end(), rng.engine());
    EXPECT_EQ(gini(w), g);
    auto s = v;
    for (auto& x : s) x *= 4.0;
    EXPECT_EQ(gini(s), g);
    const double c = rng.uniform(0.01, 100.0);
    for (auto& x : s) x = x / 4.0 * c;
    EXPECT_NEAR(gini(s), g, 1e-12);
  }
}

TEST(Gini, Errors) {
  EXPECT_THROW(gini({}), ArgumentError);
  EXPECT_THROW(gini({1.0, -1.0}), ArgumentError);
  EXPECT_THROW(gini({1.0, std::nan("")}), ArgumentError);
  EXPECT_THROW(gini({0.0, 0.0}), UndefinedValueError);
}

TEST(Gini, CurveFollowsProbes) {
  SensitivityRecord r;
  r.steps = {10, 20};
  r.per_step = {{1, 1, 1}, {0, 0, 1}};
  const auto c = gini_curve(r);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], (std::pair<std::size_t, double>{10, 0.0}));
  EXPECT_NEAR(c[1].second, 2.0 / 3.0, 1e-15);
}

TEST(ClassMatrix, SingleClassEqualsMeanSensitivity) {
  Dataset d = oracle::synthetic(8, 3, 1, 6);
  TrainConfig c = tiny_config();
  const auto m = class_sensitivity(d, c, 6, 1, {3, 6});
  const auto rec = unrolled_loss_sensitivity(d, c, 6, {3, 6});
  const double ref = std::accumulate(rec.mean_per_example.begin(), rec.mean_per_example.end(), 0.0) / d.size();
  EXPECT_NEAR(*m.at(0, 0), ref, 1e-14);
}

TEST(ClassMatrix, NonNegativeAndMissingClass) {
  Dataset d = oracle::synthetic(12, 4, 3, 7);
  for (auto& e : d.examples)
    if (e.effective_label == 2) e.effective_label = e.true_label = 0;
  d.num_classes = 4;
  TrainConfig c = tiny_config();
  const auto m = class_sensitivity(d, c, 4, 4, {2, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const bool missing = i == 2 || j == 2 || i == 3 || j == 3;
      EXPECT_EQ(m.at(i, j).has_value(), !missing) << i << "," << j;
      if (m.at(i, j)) EXPECT_GE(*m.at(i, j), 0.0);
    }
  const auto csv = class_matrix_csv(m).str();
  EXPECT_EQ(csv.substr(0, 12), "i,j,value\n0,");
  EXPECT_NE(csv.find("0,2,NA\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
}

TEST(ClassMatrix, RowsSumLikeClassRestrictedLoss) {
  // Summing objectives over classes with weights count_c/N recovers the full
  // mean loss, so count-weighted rows bound the unrolled sensitivity (triangle
  // inequality, per example).
  Dataset d = oracle::synthetic(9, 3, 3, 8);
  TrainConfig c = tiny_config();
  const auto m = class_sensitivity(d, c, 3, 3, {3});
  const auto rec = unrolled_loss_sensitivity(d, c, 3, {3});
  for (std::size_t j = 0; j < 3; ++j) {
    double bound = 0.0, mean_g = 0.0;
    for (std::size_t i = 0; i < 3; ++i) bound += *m.at(i, j) / 3.0;
    for (std::size_t x = 0; x < d.size(); ++x)
      if (d.examples[x].effective_label == j) mean_g += rec.per_step[0][x] / 3.0;
    EXPECT_LE(mean_g, bound + 1e-12);
  }
}

TEST(SensitivityCsv, Schema) {
  SensitivityRecord r;
  r.steps = {5};
  r.num_examples = 2;
  r.per_step = {{0.5, 0.25}};
  EXPECT_EQ(sensitivity_csv(r).str(), "step,example_index,g_value\n5,0,0.5\n5,1,0.25\n");
}
