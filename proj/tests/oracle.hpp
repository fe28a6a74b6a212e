#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memo.hpp"

namespace oracle {

using memo::Rng;
using memo::Shape;
using memo::Tensor;
using memo::Var;

inline constexpr double kFdStep = 1e-5;

/// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from 0 so kinks sit further than the FD step.
inline Tensor random_nonzero(const Shape& s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.data()) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

inline double eval(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  std::vector<Var> c;
  for (const auto& t : inputs) c.push_back(memo::constant(t));
  return f(c).value().item();
}

/// Largest relative error between reverse-mode gradients of f and central
/// differences, over every coordinate of every input.
inline double max_gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = kFdStep) {
  memo::Graph g;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(g.leaf(t));
  const auto grads = g.gradient(f(leaves), leaves);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (eval(f, plus) - eval(f, minus)) / (2.0 * h);
      worst = std::max(worst, rel_err(grads[k].value()[i], fd));
    }
  }
  return worst;
}

/// Projects a tensor-valued expression to a scalar with fixed random weights.
inline Var project(const Var& y, const Tensor& weights) { return memo::dot(y, memo::constant(weights)); }

struct PrimitiveCase {
  std::string name;
  std::vector<Tensor> inputs;
  ScalarFn f;
};

/// One random instance of every differentiable primitive, plus a two-layer
/// forward pass with cross-entropy loss.
inline std::vector<PrimitiveCase> primitive_cases(Rng& rng) {
  using namespace memo;
  const std::size_t m = 2 + rng.below(3), n = 2 + rng.below(3), p = 2 + rng.below(3);
  auto R = [&](Shape s) { return random_tensor(s, rng); };
  auto W = [&](Shape s) { return random_tensor(s, rng, -2.0, 2.0); };
  std::vector<PrimitiveCase> cs;
  auto add_case = [&](std::string name, std::vector<Tensor> in, Shape out_shape, std::function<Var(const std::vector<Var>&)> op) {
    Tensor w = W(out_shape);
    cs.push_back({std::move(name), std::move(in), [op, w](const std::vector<Var>& v) { return project(op(v), w); }});
  };
  add_case("add", {R({m, n}), R({m, n})}, {m, n}, [](auto& v) { return add(v[0], v[1]); });
  add_case("sub", {R({m, n}), R({m, n})}, {m, n}, [](auto& v) { return sub(v[0], v[1]); });
  add_case("mul", {R({m, n}), R({m, n})}, {m, n}, [](auto& v) { return mul(v[0], v[1]); });
  add_case("neg", {R({n})}, {n}, [](auto& v) { return neg(v[0]); });
  const double c = rng.uniform(-3.0, 3.0);
  add_case("scale", {R({m, n})}, {m, n}, [c](auto& v) { return scale(v[0], c); });
  add_case("square", {R({n})}, {n}, [](auto& v) { return square(v[0]); });
  add_case("matmul", {R({m, n}), R({n, p})}, {m, p}, [](auto& v) { return matmul(v[0], v[1]); });
  add_case("matmul_nt", {R({m, n}), R({p, n})}, {m, p}, [](auto& v) { return matmul_nt(v[0], v[1]); });
  add_case("matmul_tn", {R({n, m}), R({n, p})}, {m, p}, [](auto& v) { return matmul_tn(v[0], v[1]); });
  add_case("add_bias", {R({m, n}), R({n})}, {m, n}, [](auto& v) { return add_bias(v[0], v[1]); });
  add_case("sum_rows", {R({m, n})}, {n}, [](auto& v) { return sum_rows(v[0]); });
  add_case("broadcast_rows", {R({n})}, {m, n}, [m](auto& v) { return broadcast_rows(v[0], m); });
  add_case("row_sum", {R({m, n})}, {m}, [](auto& v) { return row_sum(v[0]); });
  add_case("broadcast_cols", {R({m})}, {m, n}, [n](auto& v) { return broadcast_cols(v[0], n); });
  add_case("sum", {R({m, n})}, {}, [](auto& v) { return sum(v[0]); });
  add_case("mean", {R({m, n})}, {}, [](auto& v) { return mean(v[0]); });
  add_case("dot", {R({n}), R({n})}, {}, [](auto& v) { return dot(v[0], v[1]); });
  add_case("fill", {R({})}, {m, n}, [m, n](auto& v) { return fill(v[0], Shape{m, n}); });
  add_case("reshape", {R({m, n})}, {n * m}, [m, n](auto& v) { return reshape(v[0], Shape{m * n}); });
  add_case("relu", {random_nonzero({m, n}, rng)}, {m, n}, [](auto& v) { return relu(v[0]); });
  std::vector<std::uint32_t> idx{0, static_cast<std::uint32_t>(m - 1), 0};
  add_case("gather_rows", {R({m, n})}, {3, n}, [idx](auto& v) { return gather_rows(v[0], idx); });
  add_case("scatter_rows", {R({3, n})}, {m, n}, [idx, m](auto& v) { return scatter_rows(v[0], idx, m); });
  add_case("softmax_vector", {R({n})}, {n}, [](auto& v) { return softmax(v[0]); });
  add_case("softmax_rows", {R({m, n})}, {m, n}, [](auto& v) { return softmax(v[0]); });
  std::vector<std::uint32_t> labels(m);
  for (auto& l : labels) l = static_cast<std::uint32_t>(rng.below(n));
  add_case("cross_entropy", {W({m, n})}, {m}, [labels](auto& v) { return cross_entropy(v[0], labels); });
  const auto label = static_cast<std::uint32_t>(rng.below(n));
  cs.push_back({"softmax_cross_entropy", {W({n})}, [label](auto& v) { return softmax_cross_entropy(v[0], label); }});
  add_case("affine", {R({n}), R({p, n}), R({p})}, {p}, [](auto& v) { return affine(v[0], v[1], v[2]); });
  add_case("affine_batch", {R({m, n}), R({p, n}), R({p})}, {m, p}, [](auto& v) { return affine(v[0], v[1], v[2]); });

  // Two hidden ReLU layers and a linear classifier on a batch; every input differentiated.
  const std::size_t d = 3 + rng.below(3), h = 3 + rng.below(3), k = 3;
  std::vector<std::uint32_t> y(m);
  for (auto& l : y) l = static_cast<std::uint32_t>(rng.below(k));
  cs.push_back({"mlp2_forward_loss",
                {R({m, d}), W({h, d}), R({h}), W({h, h}), R({h}), W({k, h}), R({k})},
                [y](const std::vector<Var>& v) {
                  std::vector<Var> params(v.begin() + 1, v.end());
                  return mean(cross_entropy(forward(params, v[0], Mode::eval, RegularizerSpec::none(), nullptr), y));
                }});
  return cs;
}

/// Perturb-and-rerun oracle for d L_t / dX: rerun the numeric training for t
/// steps with one input coordinate nudged, and difference the full-data loss.
inline double rerun_loss(const memo::Dataset& d, const memo::TrainConfig& cfg, std::size_t t) {
  using namespace memo;
  MLPParams p = init_params(cfg.hidden_sizes, d.input_dim(), d.num_classes, cfg.seed);
  std::vector<Tensor> v;
  for (const auto& x : p.tensors) v.push_back(Tensor::zeros_like(x));
  const std::size_t per_epoch = steps_per_epoch(d.size(), cfg.batch_size);
  const auto schedule = make_batch_schedule(d.size(), cfg.batch_size, (t + per_epoch - 1) / per_epoch, cfg.seed);
  const Tensor X = d.input_matrix();
  const auto labels = d.labels();
  Rng unused(0);
  for (std::size_t s = 0; s < t; ++s) {
    const auto& idx = schedule[s];
    Tensor xb(Shape{idx.size(), d.input_dim()});
    std::vector<std::uint32_t> yb;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy(X.row(idx[r]).begin(), X.row(idx[r]).end(), xb.row(r).begin());
      yb.push_back(labels[idx[r]]);
    }
    auto next = sgd_step(p, v, xb, yb, learning_rate_at_epoch(cfg, s / per_epoch + 1), cfg.momentum, cfg.regularizer,
                         unused, s + 1);
    p = std::move(next.first);
    v = std::move(next.second);
  }
  double loss = 0.0;
  const Tensor logits = predict_logits(p, X);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double q : z) s += std::exp(q - mx);
    loss += std::log(s) + mx - z[labels[i]];
  }
  return loss / static_cast<double>(d.size());
}

/// Central-difference d L_t / dX for every coordinate: [N x D].
inline Tensor fd_input_gradient(const memo::Dataset& d, const memo::TrainConfig& cfg, std::size_t t, double h = 1e-6) {
  Tensor g(Shape{d.size(), d.input_dim()});
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.input_dim(); ++j) {
      auto plus = d, minus = d;
      plus.examples[i].input[j] += h;
      minus.examples[i].input[j] -= h;
      g.at(i, j) = (rerun_loss(plus, cfg, t) - rerun_loss(minus, cfg, t)) / (2.0 * h);
    }
  return g;
}

/// A small synthetic dataset with separable-ish clusters.
inline memo::Dataset synthetic(std::size_t n, std::size_t dim, std::uint32_t classes, std::uint64_t seed) {
  memo::Dataset d;
  d.input_shape = {dim};
  d.num_classes = classes;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    memo::ExampleRecord e;
    e.index = i;
    e.true_label = e.effective_label = static_cast<std::uint32_t>(i % classes);
    for (std::size_t j = 0; j < dim; ++j) e.input.push_back(rng.uniform() + (j % classes == e.true_label ? 0.5 : 0.0));
    d.examples.push_back(std::move(e));
  }
  return d;
}

/// Linear binary classifier logits (0, w.x + b); class 1 iff w.x + b > 0.
inline memo::Classifier linear_binary(std::vector<double> w, double b) {
  using namespace memo;
  const std::size_t n = w.size();
  Tensor W(Shape{2, n});
  for (std::size_t j = 0; j < n; ++j) W.at(1, j) = w[j];
  Tensor B = Tensor::vector({0.0, b});
  return [W, B](const Var& x) { return add_bias(matmul_nt(x, constant(W)), constant(B)); };
}

/// Exact L-infinity distance from x to the hyperplane w.x + b = 0: |w.x + b| / ||w||_1.
inline double linf_distance_to_hyperplane(const std::vector<double>& w, double b, const std::vector<double>& x) {
  double s = b, l1 = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    s += w[j] * x[j];
    l1 += std::abs(w[j]);
  }
  return std::abs(s) / l1;
}

/// Logits (0, -1 + a * ||x - c||^2): class 0 near c, class 1 once ||x - c||_2^2 > 1/a.
/// The input gradient vanishes at c.
inline memo::Classifier bump(std::vector<double> center, double a) {
  using namespace memo;
  const std::size_t n = center.size();
  Tensor C(Shape{1, n}, center);
  Tensor pick(Shape{1, 2}, std::vector<double>{0.0, 1.0});
  return [C, pick, a, n](const Var& x) {
    const std::size_t rows = x.shape()[0];
    Tensor ones(Shape{rows, 1}, 1.0);
    Var diff = sub(x, matmul(constant(ones), constant(C)));
    Var r2 = row_sum(square(diff));                                  // [rows]
    Var score = add(scale(r2, a), constant(Tensor(Shape{rows}, -1.0)));
    return matmul(reshape(score, Shape{rows, 1}), constant(pick));  // [rows x 2] = (0, score)
  };
}

/// Sample variance of Binomial(n, p) / n.
inline double binomial_rate_variance(std::size_t n, double p) { return p * (1.0 - p) / static_cast<double>(n); }

}  // namespace oracle
