#include <gtest/gtest.h>

#include <cmath>

#include "memo.hpp"
#include "oracle.hpp"

using namespace memo;

namespace {

Classifier constant_model(std::size_t k = 3) {
  return [k](const Var& x) {
    // Zero-weight layer: logits depend on x only through a zero matrix, so the gradient is 0.
    return add_bias(matmul_nt(x, constant(Tensor({k, x.shape()[1]}))), constant(Tensor::vector({0.0, 1.0, 0.0})));
  };
}

LassConfig open_box(double radius = 0.3) {
  LassConfig c;
  c.radius = radius;
  c.clamp_to_domain = false;
  return c;
}

/// Point at exact L-infinity distance `dist` from w.x + b = 0 on the side of sign `side`.
std::vector<double> point_at(const std::vector<double>& w, double b, double dist, int side, Rng& rng) {
  std::vector<double> x(w.size());
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  double s = b, l1 = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * x[j], l1 += std::abs(w[j]);
  // Shift along sign(w) so that w.x + b = side * dist * ||w||_1.
  const double shift = (side * dist * l1 - s) / l1;
  for (std::size_t j = 0; j < w.size(); ++j) x[j] += shift * detail::sign(w[j]);
  return x;
}

}  // namespace

TEST(Lass, ConstantModelNeverFlips) {
  const std::vector<double> x{0.2, 0.4, 0.6, 0.8};
  for (std::uint64_t s = 0; s < 5; ++s) {
    LassConfig c;
    c.seed = s;
    const auto r = lass_search(constant_model(), x, c);
    EXPECT_FALSE(r.found);
    EXPECT_EQ(r.iterations_used, c.max_iter);
    EXPECT_EQ(r.original_prediction, 1u);
    EXPECT_FALSE(r.x_hat);
  }
}

TEST(Lass, LinearClassifierFollowsDistanceRule) {
  Rng rng(7);
  const std::vector<double> w{0.7, -1.3, 0.2, 2.0, -0.5, 0.9};
  const double b = 0.1, r = 0.3;
  const auto model = oracle::linear_binary(w, b);
  for (int i = 0; i < 100; ++i) {
    const bool inside = i % 2 == 0;
    const double dist = inside ? rng.uniform(0.01, r - 0.08) : rng.uniform(r + 0.01, 1.0);
    const auto x = point_at(w, b, dist, rng.bernoulli(0.5) ? 1 : -1, rng);
    ASSERT_NEAR(oracle::linf_distance_to_hyperplane(w, b, x), dist, 1e-12);
    LassConfig c = open_box(r);
    c.seed = static_cast<std::uint64_t>(i);
    const auto res = lass_search(model, x, c);
    EXPECT_EQ(res.found, inside) << "dist " << dist;
    if (res.found) {
      EXPECT_GE(res.linf_distance, dist - 1e-12);
      EXPECT_LE(res.linf_distance, r + 1e-12);
    }
  }
}

TEST(Lass, IteratesStayInBox) {
  Rng rng(8);
  const std::vector<double> w{1.0, -1.0, 0.5};
  const auto model = oracle::linear_binary(w, 0.0);
  for (bool clamp : {false, true}) {
    const std::vector<double> x{0.05, 0.9, 0.5};
    LassConfig c = open_box(0.2);
    c.clamp_to_domain = clamp;
    c.beta = 1.0;
    c.max_iter = 30;
    std::size_t calls = 0;
    lass_search(model, x, c, [&](std::size_t, std::size_t, std::span<const double> xt) {
      ++calls;
      for (std::size_t j = 0; j < x.size(); ++j) {
        EXPECT_LE(std::abs(xt[j] - x[j]), 0.2 + 1e-15);
        if (clamp) EXPECT_TRUE(xt[j] >= 0.0 && xt[j] <= 1.0);
      }
    });
    EXPECT_GT(calls, 0u);
  }
}

TEST(Lass, EscapesZeroGradientWhereFgsmStalls) {
  const std::vector<double> c(8, 0.5);
  const auto model = oracle::bump(c, 1.0 / 0.25);  // flips once ||x - c||^2 > 0.25; corner reaches 0.72
  int fgsm_found = 0, lass_found = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    LassConfig cfg = open_box(0.3);
    cfg.seed = s;
    fgsm_found += fgsm_search(model, c, cfg).found;
    lass_found += lass_search(model, c, cfg).found;
  }
  EXPECT_EQ(fgsm_found, 0);
  EXPECT_GE(lass_found, 18);
}

TEST(Lass, DeterministicPerSeed) {
  const auto params = init_params({8}, 5, 3, 2);
  const auto model = mlp_classifier(params);
  const std::vector<double> x{0.1, 0.2, 0.3, 0.4, 0.5};
  LassConfig c;
  c.radius = 0.5;
  const auto a = lass_search(model, x, c), b = lass_search(model, x, c);
  EXPECT_EQ(a.found, b.found);
  EXPECT_EQ(a.iterations_used, b.iterations_used);
  EXPECT_EQ(a.x_hat, b.x_hat);
}

TEST(Lass, RowsAreIndependentOfBatch) {
  const auto params = init_params({8}, 4, 3, 5);
  const auto model = mlp_classifier(params);
  Rng rng(1);
  const Tensor x = oracle::random_tensor({6, 4}, rng, 0.0, 1.0);
  LassConfig c;
  c.radius = 0.4;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6};
  const auto all = lass_search_batch(model, x, c, seeds);
  for (std::size_t r = 0; r < 6; ++r) {
    Tensor one(Shape{1, 4}, std::vector<double>(x.row(r).begin(), x.row(r).end()));
    const auto single = lass_search_batch(model, one, c, {seeds[r]});
    EXPECT_EQ(single[0].x_hat, all[r].x_hat);
    EXPECT_EQ(single[0].iterations_used, all[r].iterations_used);
  }
}

TEST(Lass, FoundSampleReallyFlips) {
  const auto params = init_params({16}, 6, 4, 3);
  const auto model = mlp_classifier(params);
  Rng rng(2);
  const Tensor x = oracle::random_tensor({40, 6}, rng, 0.0, 1.0);
  std::vector<std::uint64_t> seeds(40);
  for (std::size_t i = 0; i < 40; ++i) seeds[i] = i;
  LassConfig c;
  c.radius = 0.5;
  std::size_t found = 0;
  for (const auto& r : lass_search_batch(model, x, c, seeds)) {
    if (!r.found) continue;
    ++found;
    const Tensor at = predict_logits(params, Tensor(Shape{1, 6}, *r.x_hat));
    EXPECT_EQ(argmax(at.row(0)), *r.flipped_prediction);
    EXPECT_NE(*r.flipped_prediction, r.original_prediction);
  }
  EXPECT_GT(found, 0u);
}

TEST(Lass, LargerRadiusNeverHurtsOnLinearModel) {
  Rng rng(3);
  const std::vector<double> w{1.0, 2.0, -1.0};
  const auto model = oracle::linear_binary(w, -0.2);
  for (int i = 0; i < 30; ++i) {
    const std::vector<double> x{rng.uniform(), rng.uniform(), rng.uniform()};
    bool prev = false;
    for (double r : {0.05, 0.1, 0.2, 0.4, 0.8}) {
      LassConfig c = open_box(r);
      c.beta = 0.0;
      const bool f = lass_search(model, x, c).found;
      EXPECT_TRUE(!prev || f);
      prev = f;
    }
  }
}

TEST(Lass, RawLogitRuleOnLinearModel) {
  const std::vector<double> w{1.0, -2.0};
  const auto model = oracle::linear_binary(w, 0.0);
  LassConfig c = open_box(0.3);
  c.rule = GradientRule::raw_logit_at_start;
  c.beta = 0.0;
  // Predicted class 0 here; ascending f_0 = 0 gives no push, so the literal rule stalls.
  EXPECT_FALSE(lass_search(model, std::vector<double>{-0.1, 0.0}, c).found);
  // Predicted class 1: ascending f_1 moves away from the boundary.
  EXPECT_FALSE(lass_search(model, std::vector<double>{0.1, 0.0}, c).found);
  c.rule = GradientRule::predicted_class_loss;
  EXPECT_TRUE(lass_search(model, std::vector<double>{0.1, 0.0}, c).found);
}

TEST(Lass, InvalidConfigAndInput) {
  LassConfig c;
  c.radius = 0.0;
  EXPECT_THROW(lass_search(constant_model(), std::vector<double>{0.1}, c), ArgumentError);
  EXPECT_THROW(lass_search(constant_model(), std::vector<double>{std::nan("")}, LassConfig{}), ArgumentError);
}

TEST(Csr, ConstantModelIsZero) {
  Dataset d = oracle::synthetic(20, 4, 3, 1);
  const auto rep = csr(constant_model(), d, LassConfig{});
  EXPECT_EQ(rep.csr, 0.0);
  EXPECT_EQ(rep.found_count(), 0u);
  EXPECT_EQ(rep.per_sample.size(), 20u);
}

TEST(Csr, LinearModelMatchesPlacement) {
  Rng rng(4);
  const std::vector<double> w{0.5, -1.0, 1.5, 0.25};
  const double b = 0.05, r = 0.2;
  Dataset d;
  d.input_shape = {4};
  d.num_classes = 2;
  std::size_t inside = 0;
  for (std::size_t i = 0; i < 60; ++i) {
    const bool in = rng.bernoulli(0.3);
    inside += in;
    ExampleRecord e;
    e.index = i;
    e.input = point_at(w, b, in ? rng.uniform(0.01, r - 0.06) : rng.uniform(r + 0.01, 0.8), rng.bernoulli(0.5) ? 1 : -1, rng);
    d.examples.push_back(e);
  }
  const auto rep = csr(oracle::linear_binary(w, b), d, open_box(r), 7);
  EXPECT_DOUBLE_EQ(rep.csr, static_cast<double>(inside) / 60.0);
  EXPECT_EQ(rep.found_count(), inside);
  // chunking does not change outcomes
  const auto whole = csr(oracle::linear_binary(w, b), d, open_box(r), 0);
  EXPECT_EQ(csr_csv(rep).str(), csr_csv(whole).str());
}

TEST(Csr, OverTrainingNeedsSnapshots) {
  const Dataset d = oracle::synthetic(20, 4, 2, 1);
  TrainConfig c;
  c.hidden_sizes = {4};
  c.batch_size = 5;
  c.epochs = 4;
  c.snapshot_every_epochs = 2;
  const auto t = train(d, nullptr, c);
  const auto series = csr_over_training(t, d, LassConfig{}, 2);
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[1].first, 4u);
  EXPECT_EQ(series[1].second.epoch_tag, 4u);
  EXPECT_THROW(csr_over_training(t, d, LassConfig{}, 1), GapError);
}

TEST(Csr, CsvSchemaAndSummary) {
  CsrReport r;
  r.dataset_size = 2;
  CriticalSampleResult a;
  a.example_index = 3;
  a.found = true;
  a.iterations_used = 4;
  a.linf_distance = 0.25;
  a.original_prediction = 1;
  a.flipped_prediction = 2;
  CriticalSampleResult b;
  b.example_index = 5;
  b.iterations_used = 100;
  r.per_sample = {a, b};
  r.csr = 0.5;
  EXPECT_EQ(csr_csv(r).str(),
            "example_index,found,iterations,linf_distance,original_class,flipped_class\n3,1,4,0.25,1,2\n5,0,100,0,0,\n");
  const auto j = csr_summary(r, LassConfig{});
  EXPECT_EQ(j["found"], 1);
  EXPECT_TRUE(j["epoch"].is_null());
}
