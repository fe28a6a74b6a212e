#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "memo/autodiff.hpp"
#include "memo/data.hpp"
#include "memo/errors.hpp"
#include "memo/rng.hpp"

namespace memo {

/// ReLU MLP: hidden layers followed by a linear classification layer.
/// Stored as [W0, b0, W1, b1, ...] with W_l of shape [fan_out x fan_in].
struct MLPParams {
  std::vector<Tensor> tensors;

  std::size_t num_layers() const { return tensors.size() / 2; }
  const Tensor& weight(std::size_t l) const { return tensors[2 * l]; }
  const Tensor& bias(std::size_t l) const { return tensors[2 * l + 1]; }
  std::size_t input_dim() const { return tensors.front().shape()[1]; }
  std::size_t num_classes() const { return tensors.back().shape()[0]; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  bool operator==(const MLPParams&) const = default;
};

enum class RegKind : std::uint8_t {
  none = 0,
  dropout,
  input_dropout,
  input_gaussian,
  hidden_gaussian,
  weight_decay,
  adversarial,
};

struct RegularizerSpec {
  RegKind kind = RegKind::none;
  double value = 0.0;   ///< p, sigma or lambda depending on kind; adversarial weight w
  double dropout = 0.0; ///< adversarial only: hidden dropout rate

  static RegularizerSpec none() { return {}; }
  static RegularizerSpec make_dropout(double p) { return {RegKind::dropout, p, 0.0}; }
  static RegularizerSpec make_input_dropout(double p) { return {RegKind::input_dropout, p, 0.0}; }
  static RegularizerSpec make_input_gaussian(double sigma) { return {RegKind::input_gaussian, sigma, 0.0}; }
  static RegularizerSpec make_hidden_gaussian(double sigma) { return {RegKind::hidden_gaussian, sigma, 0.0}; }
  static RegularizerSpec make_weight_decay(double lambda) { return {RegKind::weight_decay, lambda, 0.0}; }
  static RegularizerSpec make_adversarial(double w, double p) { return {RegKind::adversarial, w, p}; }

  double hidden_dropout() const {
    if (kind == RegKind::dropout) return value;
    if (kind == RegKind::adversarial) return dropout;
    return 0.0;
  }

  void validate() const {
    auto in_unit = [](double p) { return p >= 0.0 && p < 1.0; };
    switch (kind) {
      case RegKind::none: return;
      case RegKind::dropout:
      case RegKind::input_dropout:
        if (!in_unit(value)) throw ArgumentError("dropout rate must be in [0, 1)");
        return;
      case RegKind::input_gaussian:
      case RegKind::hidden_gaussian:
        if (!(value >= 0.0)) throw ArgumentError("noise stddev must be >= 0");
        return;
      case RegKind::weight_decay:
        if (!(value >= 0.0)) throw ArgumentError("weight decay must be >= 0");
        return;
      case RegKind::adversarial:
        if (!(value >= 0.0 && value <= 1.0)) throw ArgumentError("adversarial weight must be in [0, 1]");
        if (!in_unit(dropout)) throw ArgumentError("dropout rate must be in [0, 1)");
        return;
    }
  }
  bool operator==(const RegularizerSpec&) const = default;
};

inline const char* to_string(RegKind k) {
  switch (k) {
    case RegKind::none: return "none";
    case RegKind::dropout: return "dropout";
    case RegKind::input_dropout: return "input_dropout";
    case RegKind::input_gaussian: return "input_gaussian";
    case RegKind::hidden_gaussian: return "hidden_gaussian";
    case RegKind::weight_decay: return "weight_decay";
    case RegKind::adversarial: return "adversarial";
  }
  return "?";
}

inline RegKind parse_reg_kind(const std::string& s) {
  for (auto k : {RegKind::none, RegKind::dropout, RegKind::input_dropout, RegKind::input_gaussian,
                 RegKind::hidden_gaussian, RegKind::weight_decay, RegKind::adversarial})
    if (s == to_string(k)) return k;
  throw ArgumentError("unknown regularizer '" + s + "'");
}

/// Glorot-uniform weights, zero biases.
inline MLPParams init_params(const std::vector<std::size_t>& hidden_sizes, std::size_t input_dim,
                             std::size_t num_classes, std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 1) throw ArgumentError("layer sizes must be >= 1");
  for (auto h : hidden_sizes)
    if (h < 1) throw ArgumentError("layer sizes must be >= 1");
  Rng rng(derive_seed(seed, "init"));
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), hidden_sizes.begin(), hidden_sizes.end());
  sizes.push_back(num_classes);
  MLPParams p;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t fan_in = sizes[l], fan_out = sizes[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w(Shape{fan_out, fan_in});
    for (auto& v : w.data()) v = rng.uniform(-limit, limit);
    p.tensors.push_back(std::move(w));
    p.tensors.emplace_back(Shape{fan_out});
  }
  return p;
}

enum class Mode { train, eval };

namespace detail {

inline Var dropout_mask(const Var& h, double p, Rng& rng) {
  Tensor mask(h.shape());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask.data()) m = rng.uniform() >= p ? keep : 0.0;
  return mul(h, constant(std::move(mask)));
}

inline Var gaussian_noise(const Var& h, double sigma, Rng& rng) {
  Tensor noise(h.shape());
  for (auto& n : noise.data()) n = rng.normal(0.0, sigma);
  return add(h, constant(std::move(noise)));
}

}  // namespace detail

/// Logits [B x k] for a batch of inputs [B x D]. Parameters are given as graph
/// values so the forward pass can sit inside a differentiated expression.
/// Train mode applies the stochastic regularizers (inverted dropout scaling);
/// eval mode applies none.
inline Var forward(const std::vector<Var>& params, const Var& x, Mode mode, const RegularizerSpec& reg, Rng* rng) {
  if (params.size() < 2 || params.size() % 2 != 0) throw ArgumentError("forward: malformed parameter list");
  const std::size_t in = params[0].shape()[1];
  if (x.value().rank() != 2 || x.shape()[1] != in)
    throw DimensionError("forward: input " + shape_string(x.shape()) + " does not match first layer " +
                         shape_string(params[0].shape()));
  const bool stochastic = mode == Mode::train && reg.kind != RegKind::none && reg.kind != RegKind::weight_decay;
  if (stochastic && rng == nullptr) throw ArgumentError("forward: train-mode regularizer needs an rng");

  Var h = x;
  if (mode == Mode::train) {
    if (reg.kind == RegKind::input_dropout && reg.value > 0.0) h = detail::dropout_mask(h, reg.value, *rng);
    if (reg.kind == RegKind::input_gaussian && reg.value > 0.0) h = detail::gaussian_noise(h, reg.value, *rng);
  }
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_bias(matmul_nt(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 == layers) break;
    h = relu(h);
    if (mode == Mode::train) {
      const double p = reg.hidden_dropout();
      if (p > 0.0) h = detail::dropout_mask(h, p, *rng);
      if (reg.kind == RegKind::hidden_gaussian && reg.value > 0.0) h = detail::gaussian_noise(h, reg.value, *rng);
    }
  }
  return h;
}

inline std::vector<Var> as_constants(const MLPParams& p) {
  std::vector<Var> v;
  v.reserve(p.tensors.size());
  for (const auto& t : p.tensors) v.push_back(constant(t));
  return v;
}

/// Eval-mode logits for an [N x D] input matrix.
inline Tensor predict_logits(const MLPParams& p, const Tensor& inputs) {
  return forward(as_constants(p), constant(inputs), Mode::eval, RegularizerSpec::none(), nullptr).value();
}

/// Index of the largest entry; ties go to the lowest index.
inline std::uint32_t argmax(std::span<const double> row) {
  std::uint32_t best = 0;
  for (std::uint32_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

struct Evaluation {
  double accuracy = 0.0;
  std::vector<bool> correct;
};

/// Argmax prediction against effective labels; ties break toward the lowest class index.
inline Evaluation evaluate(const MLPParams& p, const Dataset& d) {
  Evaluation ev;
  if (d.size() == 0) return ev;
  const Tensor logits = predict_logits(p, d.input_matrix());
  ev.correct.resize(d.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    ev.correct[i] = argmax(logits.row(i)) == d.examples[i].effective_label;
    hits += ev.correct[i];
  }
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(d.size());
  return ev;
}

}  // namespace memo
