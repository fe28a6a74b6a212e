#pragma once

// Langevin adversarial sample search: sign-gradient ascent plus Gaussian
// exploration noise, projected back into an L-infinity box around the start
// point after every step. The search stops as soon as the predicted class
// differs from the prediction at the start point.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "memo/autodiff.hpp"
#include "memo/errors.hpp"
#include "memo/mlp.hpp"
#include "memo/rng.hpp"

namespace memo {

/// Maps a batch of inputs [B x n] to logits [B x k]. Must treat rows independently.
using Classifier = std::function<Var(const Var& inputs)>;

inline Classifier mlp_classifier(const MLPParams& params) {
  return [p = as_constants(params)](const Var& x) {
    return forward(p, x, Mode::eval, RegularizerSpec::none(), nullptr);
  };
}

enum class GradientRule : std::uint8_t {
  /// Ascend the cross-entropy at the originally predicted class, evaluated at the current iterate.
  predicted_class_loss = 0,
  /// Step along sign(d f_k / dx) taken once at the start point, k the predicted class.
  raw_logit_at_start = 1,
};

struct LassConfig {
  double alpha = 0.25;
  double beta = 0.2;
  double radius = 0.3;
  std::size_t max_iter = 100;
  std::uint64_t seed = 0;
  bool clamp_to_domain = true;
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  GradientRule rule = GradientRule::predicted_class_loss;

  void validate() const {
    if (!(alpha > 0.0)) throw ArgumentError("lass: alpha must be > 0");
    if (!(beta >= 0.0)) throw ArgumentError("lass: beta must be >= 0");
    if (!(radius > 0.0)) throw ArgumentError("lass: radius must be > 0");
    if (max_iter < 1) throw ArgumentError("lass: max_iter must be >= 1");
  }
  bool operator==(const LassConfig&) const = default;
};

struct CriticalSampleResult {
  std::uint64_t example_index = 0;
  bool found = false;
  std::optional<std::vector<double>> x_hat;
  std::size_t iterations_used = 0;
  std::uint32_t original_prediction = 0;
  std::optional<std::uint32_t> flipped_prediction;
  double linf_distance = 0.0;  ///< ||x_hat - x||_inf when found, else 0
  std::string error;           ///< non-empty when the search failed
};

/// Called after every projection with the row, the 1-based iteration and the iterate.
using LassObserver = std::function<void(std::size_t row, std::size_t iter, std::span<const double> x_tilde)>;

namespace detail {

inline int sign(double v) { return (v > 0.0) - (v < 0.0); }

inline bool row_finite(std::span<const double> r) {
  for (double v : r)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

/// Runs the search independently for each row of `inputs` [B x n]. Row r draws
/// its noise from Rng(seeds[r]); results do not depend on the batch composition.
/// A non-finite model output is recorded in the row's `error` field.
inline std::vector<CriticalSampleResult> lass_search_batch(const Classifier& model, const Tensor& inputs,
                                                           const LassConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                                           const LassObserver& observer = {}) {
  cfg.validate();
  if (inputs.rank() != 2) throw DimensionError("lass: inputs must be [B x n], got " + shape_string(inputs.shape()));
  const std::size_t rows = inputs.dim(0), n = inputs.dim(1);
  if (seeds.size() != rows) throw ArgumentError("lass: one seed per row required");

  std::vector<CriticalSampleResult> out(rows);
  std::vector<Rng> rngs;
  rngs.reserve(rows);
  for (auto s : seeds) rngs.emplace_back(s);

  // Original predictions, and the frozen start-point gradient for the literal rule.
  std::vector<std::uint32_t> pred(rows);
  Tensor frozen_grad;
  {
    Graph g;
    Var x = g.leaf(inputs);
    Var logits = model(x);
    if (logits.value().rank() != 2 || logits.shape()[0] != rows || logits.shape()[1] < 2)
      throw DimensionError("lass: model must return [B x k] logits with k >= 2");
    const std::size_t k = logits.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
      if (!detail::row_finite(logits.value().row(r))) {
        out[r].error = "non-finite model output at start point";
        continue;
      }
      pred[r] = argmax(logits.value().row(r));
      out[r].original_prediction = pred[r];
    }
    if (cfg.rule == GradientRule::raw_logit_at_start) {
      Tensor pick(Shape{rows, k});
      for (std::size_t r = 0; r < rows; ++r) pick.at(r, pred[r]) = 1.0;
      frozen_grad = g.gradient(sum(mul(logits, constant(std::move(pick)))), {x})[0].value();
    }
  }

  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r)
    if (out[r].error.empty()) active.push_back(r);

  Tensor current = inputs;  // iterates for all rows
  for (std::size_t iter = 1; iter <= cfg.max_iter && !active.empty(); ++iter) {
    const std::size_t m = active.size();
    Tensor batch(Shape{m, n});
    std::vector<std::uint32_t> labels(m);
    for (std::size_t a = 0; a < m; ++a) {
      auto src = current.row(active[a]);
      std::copy(src.begin(), src.end(), batch.row(a).begin());
      labels[a] = pred[active[a]];
    }

    Tensor grad;
    if (cfg.rule == GradientRule::predicted_class_loss) {
      Graph g;
      Var x = g.leaf(batch);
      grad = g.gradient(sum(cross_entropy(model(x), labels)), {x})[0].value();
    }

    for (std::size_t a = 0; a < m; ++a) {
      const std::size_t r = active[a];
      auto x0 = inputs.row(r);
      auto xt = current.row(r);
      auto gr = cfg.rule == GradientRule::predicted_class_loss ? grad.row(a) : frozen_grad.row(r);
      for (std::size_t i = 0; i < n; ++i) {
        double step = cfg.alpha * detail::sign(gr[i]);
        if (cfg.beta > 0.0) step += cfg.beta * rngs[r].normal();
        double v = xt[i] + step;
        if (std::abs(v - x0[i]) > cfg.radius) v = x0[i] + cfg.radius * detail::sign(v - x0[i]);
        if (cfg.clamp_to_domain) {
          const double lo = std::max(cfg.domain_lo, x0[i] - cfg.radius);
          const double hi = std::min(cfg.domain_hi, x0[i] + cfg.radius);
          if (lo <= hi) v = std::clamp(v, lo, hi);
        }
        xt[i] = v;
      }
      if (observer) observer(r, iter, xt);
    }

    Tensor moved(Shape{m, n});
    for (std::size_t a = 0; a < m; ++a) {
      auto src = current.row(active[a]);
      std::copy(src.begin(), src.end(), moved.row(a).begin());
    }
    const Tensor logits = model(constant(std::move(moved))).value();
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < m; ++a) {
      const std::size_t r = active[a];
      out[r].iterations_used = iter;
      if (!detail::row_finite(logits.row(a))) {
        out[r].error = "non-finite model output at iteration " + std::to_string(iter);
        continue;
      }
      const auto now = argmax(logits.row(a));
      if (now != pred[r]) {
        out[r].found = true;
        out[r].flipped_prediction = now;
        auto xt = current.row(r);
        out[r].x_hat = std::vector<double>(xt.begin(), xt.end());
        double d = 0.0;
        auto x0 = inputs.row(r);
        for (std::size_t i = 0; i < n; ++i) d = std::max(d, std::abs(xt[i] - x0[i]));
        out[r].linf_distance = d;
      } else {
        still.push_back(r);
      }
    }
    active.swap(still);
  }
  return out;
}

/// Single-point search. Throws SearchError on non-finite model output.
inline CriticalSampleResult lass_search(const Classifier& model, std::span<const double> x, const LassConfig& cfg,
                                        const LassObserver& observer = {}) {
  for (double v : x)
    if (!std::isfinite(v)) throw ArgumentError("lass: input must be finite");
  Tensor in(Shape{1, x.size()}, std::vector<double>(x.begin(), x.end()));
  auto res = lass_search_batch(model, in, cfg, {derive_seed(cfg.seed, "lass")}, observer);
  if (!res[0].error.empty()) throw SearchError("lass: " + res[0].error);
  return std::move(res[0]);
}

/// The deterministic sign-gradient baseline: LASS with beta = 0.
inline CriticalSampleResult fgsm_search(const Classifier& model, std::span<const double> x, LassConfig cfg,
                                        const LassObserver& observer = {}) {
  cfg.beta = 0.0;
  return lass_search(model, x, cfg, observer);
}

}  // namespace memo
