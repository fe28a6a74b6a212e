#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <new>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "memo/autodiff.hpp"
#include "memo/data.hpp"
#include "memo/errors.hpp"
#include "memo/io.hpp"
#include "memo/mlp.hpp"
#include "memo/train.hpp"

namespace memo {

enum class NormKind : std::uint8_t { l1 = 0, l2, linf };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::l1: return "l1";
    case NormKind::l2: return "l2";
    case NormKind::linf: return "linf";
  }
  return "?";
}

inline NormKind parse_norm_kind(const std::string& s) {
  for (auto k : {NormKind::l1, NormKind::l2, NormKind::linf})
    if (s == to_string(k)) return k;
  throw ArgumentError("unknown norm '" + s + "'");
}

inline double norm(std::span<const double> v, NormKind k) {
  double acc = 0.0;
  switch (k) {
    case NormKind::l1:
      for (double x : v) acc += std::abs(x);
      return acc;
    case NormKind::l2:
      for (double x : v) acc += x * x;
      return std::sqrt(acc);
    case NormKind::linf:
      for (double x : v) acc = std::max(acc, std::abs(x));
      return acc;
  }
  return acc;
}

enum class Retention : std::uint8_t {
  automatic = 0,  ///< full retention unless the estimate exceeds memory_budget_bytes
  full,
  checkpointed,
};

struct UnrollOptions {
  Retention retention = Retention::automatic;
  std::size_t checkpoint_interval = 0;                 ///< steps per replayed segment; 0 = ceil(sqrt(T))
  std::size_t memory_budget_bytes = std::size_t{1} << 31;
};

/// Probe steps 10, 20, ... up to T (T itself is always included).
inline std::vector<std::size_t> default_probe_steps(std::size_t T, std::size_t every = 10) {
  std::vector<std::size_t> p;
  for (std::size_t t = every; t <= T; t += every) p.push_back(t);
  if (p.empty() || p.back() != T) p.push_back(T);
  return p;
}

/// Objectives evaluated at a probe: given theta_t (as graph values) and the
/// input leaf X, return scalars to differentiate w.r.t. X.
using ProbeObjectives = std::function<std::vector<Var>(const std::vector<Var>& params, const Var& inputs)>;
/// Receives d(objective)/dX [N x D] for each probe (index into the probe list) and objective.
using ProbeSink = std::function<void(std::size_t probe, std::size_t objective, const Tensor& grad_inputs)>;

namespace detail {

inline void check_unroll_args(const Dataset& d, const TrainConfig& cfg, std::size_t T,
                              const std::vector<std::size_t>& probes) {
  cfg.validate();
  if (d.size() == 0) throw ArgumentError("unroll: empty dataset");
  if (T < 1) throw ArgumentError("unroll: T must be >= 1");
  if (probes.empty()) throw ArgumentError("unroll: no probe steps");
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (probes[i] < 1 || probes[i] > T) throw ArgumentError("unroll: probe step " + std::to_string(probes[i]) + " outside [1, T]");
    if (i && probes[i] <= probes[i - 1]) throw ArgumentError("unroll: probe steps must be strictly increasing");
  }
  const auto k = cfg.regularizer.kind;
  if (k != RegKind::none && k != RegKind::weight_decay)
    throw ArgumentError(std::string("unroll: stochastic regularizer '") + to_string(k) + "' is not supported");
}

/// Runs the graph steps (from, to] starting from `state`, inputs taken from the leaf X.
inline SgdState unroll_steps(Graph& g, SgdState state, const Var& X, const std::vector<std::uint32_t>& labels,
                             const BatchSchedule& schedule, const TrainConfig& cfg, std::size_t per_epoch,
                             std::size_t from, std::size_t to, bool create_graph) {
  for (std::size_t s = from; s < to; ++s) {
    const auto& idx = schedule[s];
    Var xb = gather_rows(X, idx);
    const double lr = learning_rate_at_epoch(cfg, s / per_epoch + 1);
    auto r = sgd_step_expr(g, state, xb, pick(labels, idx), lr, cfg.momentum, cfg.regularizer, nullptr, create_graph,
                           s + 1);
    state = std::move(r.next);
  }
  return state;
}

inline void check_finite_grad(const Tensor& t, std::size_t probe_step) {
  if (!t.all_finite()) throw NonFiniteError("non-finite hypergradient at probe step " + std::to_string(probe_step));
}

inline void unroll_full(const Dataset& d, const TrainConfig& cfg, const std::vector<std::size_t>& probes,
                        const BatchSchedule& schedule, const ProbeObjectives& objectives, const ProbeSink& sink) {
  const auto labels = d.labels();
  const std::size_t per_epoch = steps_per_epoch(d.size(), cfg.batch_size);
  Graph g;
  Var X = g.leaf(d.input_matrix());
  SgdState state;
  const MLPParams p0 = init_params(cfg.hidden_sizes, d.input_dim(), d.num_classes, cfg.seed);
  for (const auto& t : p0.tensors) {
    state.params.push_back(g.leaf(t));
    state.velocity.push_back(constant(Tensor::zeros_like(t)));
  }
  std::size_t done = 0;
  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    state = unroll_steps(g, std::move(state), X, labels, schedule, cfg, per_epoch, done, probes[pi], true);
    done = probes[pi];
    auto objs = objectives(state.params, X);
    for (std::size_t o = 0; o < objs.size(); ++o) {
      Tensor gx = g.gradient(objs[o], {X})[0].value();
      check_finite_grad(gx, done);
      sink(pi, o, gx);
    }
  }
}

inline void unroll_checkpointed(const Dataset& d, const TrainConfig& cfg, const std::vector<std::size_t>& probes,
                                const BatchSchedule& schedule, std::size_t interval, const ProbeObjectives& objectives,
                                const ProbeSink& sink) {
  const auto labels = d.labels();
  const std::size_t per_epoch = steps_per_epoch(d.size(), cfg.batch_size);
  const Tensor inputs = d.input_matrix();
  const std::size_t T = probes.back();

  // Numeric forward pass; keep theta and v at every segment boundary.
  std::vector<std::pair<std::vector<Tensor>, std::vector<Tensor>>> boundary;
  {
    const MLPParams p0 = init_params(cfg.hidden_sizes, d.input_dim(), d.num_classes, cfg.seed);
    std::vector<Tensor> theta = p0.tensors, vel;
    for (const auto& t : theta) vel.push_back(Tensor::zeros_like(t));
    boundary.emplace_back(theta, vel);
    for (std::size_t s = 0; s < T; ++s) {
      Graph g;
      SgdState st;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        st.params.push_back(g.leaf(theta[i]));
        st.velocity.push_back(constant(vel[i]));
      }
      Var X = constant(inputs);
      st = unroll_steps(g, std::move(st), X, labels, schedule, cfg, per_epoch, s, s + 1, false);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] = st.params[i].value();
        vel[i] = st.velocity[i].value();
      }
      if ((s + 1) % interval == 0) boundary.emplace_back(theta, vel);
    }
  }

  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    const std::size_t t = probes[pi];
    const std::size_t last_seg = t / interval;  // boundary index at or before t
    std::size_t n_obj = 0;
    {
      Graph g;
      std::vector<Var> params;
      for (const auto& x : boundary[0].first) params.push_back(constant(x));
      n_obj = objectives(params, constant(inputs)).size();
    }
    for (std::size_t o = 0; o < n_obj; ++o) {
      Tensor grad_x(inputs.shape());
      std::vector<Tensor> adj_theta, adj_v;
      for (std::size_t seg = last_seg + 1; seg-- > 0;) {
        const std::size_t from = seg * interval;
        const std::size_t to = seg == last_seg ? t : from + interval;
        Graph g;
        Var X = g.leaf(inputs);
        SgdState st;
        for (std::size_t i = 0; i < boundary[seg].first.size(); ++i) {
          st.params.push_back(g.leaf(boundary[seg].first[i]));
          st.velocity.push_back(g.leaf(boundary[seg].second[i]));
        }
        std::vector<Var> wrt{X};
        wrt.insert(wrt.end(), st.params.begin(), st.params.end());
        wrt.insert(wrt.end(), st.velocity.begin(), st.velocity.end());
        SgdState end = unroll_steps(g, st, X, labels, schedule, cfg, per_epoch, from, to, true);
        Var objective;
        if (seg == last_seg) {
          objective = objectives(end.params, X)[o];
        } else {
          objective = constant(Tensor::scalar(0.0));
          for (std::size_t i = 0; i < end.params.size(); ++i) {
            objective = add(objective, dot(end.params[i], constant(adj_theta[i])));
            objective = add(objective, dot(end.velocity[i], constant(adj_v[i])));
          }
        }
        auto grads = g.gradient(objective, wrt);
        const auto& gx = grads[0].value();
        for (std::size_t i = 0; i < gx.size(); ++i) grad_x[i] += gx[i];
        const std::size_t np = st.params.size();
        adj_theta.assign(np, Tensor());
        adj_v.assign(np, Tensor());
        for (std::size_t i = 0; i < np; ++i) {
          adj_theta[i] = grads[1 + i].value();
          adj_v[i] = grads[1 + np + i].value();
        }
      }
      check_finite_grad(grad_x, t);
      sink(pi, o, grad_x);
    }
  }
}

}  // namespace detail

/// Trains for the probe horizon with the inputs registered as graph leaves and
/// hands d(objective_t)/dX to `sink` at every probe step. Training follows the
/// same batch schedule and update rule as `train` with the same config.
inline void unroll_input_gradients(const Dataset& d, const TrainConfig& cfg, std::size_t T,
                                   const std::vector<std::size_t>& probes, const UnrollOptions& opts,
                                   const ProbeObjectives& objectives, const ProbeSink& sink) {
  detail::check_unroll_args(d, cfg, T, probes);
  const std::size_t per_epoch = steps_per_epoch(d.size(), cfg.batch_size);
  BatchSchedule schedule = make_batch_schedule(d.size(), cfg.batch_size, (T + per_epoch - 1) / per_epoch, cfg.seed);
  schedule.resize(T);
  std::size_t interval = opts.checkpoint_interval;
  if (interval == 0) interval = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(T))));

  Retention mode = opts.retention;
  if (mode == Retention::automatic) {
    // Estimate from the bytes one recorded step retains.
    Graph g;
    Var X = g.leaf(d.input_matrix());
    SgdState st;
    const MLPParams p0 = init_params(cfg.hidden_sizes, d.input_dim(), d.num_classes, cfg.seed);
    for (const auto& t : p0.tensors) {
      st.params.push_back(g.leaf(t));
      st.velocity.push_back(constant(Tensor::zeros_like(t)));
    }
    const std::size_t base = g.retained_bytes();
    detail::unroll_steps(g, st, X, d.labels(), schedule, cfg, per_epoch, 0, 1, true);
    const double per_step = static_cast<double>(g.retained_bytes() - base);
    mode = per_step * static_cast<double>(probes.back()) + static_cast<double>(base) >
                   static_cast<double>(opts.memory_budget_bytes)
               ? Retention::checkpointed
               : Retention::full;
  }
  try {
    if (mode == Retention::full)
      detail::unroll_full(d, cfg, probes, schedule, objectives, sink);
    else
      detail::unroll_checkpointed(d, cfg, probes, schedule, interval, objectives, sink);
  } catch (const std::bad_alloc&) {
    throw MemoryError("unroll ran out of memory (" + std::string(mode == Retention::full ? "full retention" : "checkpointed") +
                      ", interval " + std::to_string(interval) + "); use checkpointing with a smaller checkpoint interval");
  }
}

struct SensitivityRecord {
  std::vector<std::size_t> steps;               ///< probe steps t (SGD steps)
  std::vector<std::vector<double>> per_step;    ///< [probe][example] g^t_x
  std::vector<double> mean_per_example;         ///< average of per_step over probes
  NormKind norm_kind = NormKind::l1;
  std::size_t T = 0;
  std::size_t num_examples = 0;
};

/// Mean cross-entropy over the whole dataset at theta_t.
inline Var dataset_loss(const std::vector<Var>& params, const Var& inputs, const std::vector<std::uint32_t>& labels) {
  return mean(cross_entropy(forward(params, inputs, Mode::eval, RegularizerSpec::none(), nullptr), labels));
}

/// g^t_x = ||d L_t / d x|| for every example x, L_t the mean training loss
/// after t unrolled SGD steps.
inline SensitivityRecord unrolled_loss_sensitivity(const Dataset& d, const TrainConfig& cfg, std::size_t T,
                                                   std::vector<std::size_t> probe_steps = {},
                                                   NormKind norm_kind = NormKind::l1, const UnrollOptions& opts = {}) {
  if (probe_steps.empty() && T >= 1) probe_steps = default_probe_steps(T);
  SensitivityRecord rec;
  rec.steps = probe_steps;
  rec.norm_kind = norm_kind;
  rec.T = T;
  rec.num_examples = d.size();
  rec.per_step.assign(probe_steps.size(), std::vector<double>(d.size(), 0.0));
  const auto labels = d.labels();
  unroll_input_gradients(
      d, cfg, T, probe_steps, opts,
      [&](const std::vector<Var>& params, const Var& X) { return std::vector<Var>{dataset_loss(params, X, labels)}; },
      [&](std::size_t p, std::size_t, const Tensor& gx) {
        for (std::size_t i = 0; i < d.size(); ++i) rec.per_step[p][i] = norm(gx.row(i), norm_kind);
      });
  rec.mean_per_example.assign(d.size(), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0.0;
    for (const auto& row : rec.per_step) s += row[i];
    rec.mean_per_example[i] = s / static_cast<double>(rec.per_step.size());
  }
  return rec;
}

/// Mean-absolute-difference Gini coefficient, evaluated in sorted form:
/// sum_i (2i - n - 1) v_(i) / (n * sum v), which equals
/// sum_ij |v_i - v_j| / (2 n^2 mean v).
inline double gini(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("gini: empty vector");
  for (double x : v)
    if (!(x >= 0.0) || !std::isfinite(x)) throw ArgumentError("gini: values must be finite and >= 0");
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double total = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    total += v[i];
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * v[i];
  }
  if (total == 0.0) throw UndefinedValueError("gini: undefined for an all-zero vector");
  return weighted / (n * total);
}

/// One (step, gini) pair per probe step, in step order.
inline std::vector<std::pair<std::size_t, double>> gini_curve(const SensitivityRecord& rec) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t p = 0; p < rec.steps.size(); ++p) out.emplace_back(rec.steps[p], gini(rec.per_step[p]));
  return out;
}

struct ClassSensitivityMatrix {
  std::size_t num_classes = 0;
  std::vector<std::optional<double>> values;  ///< row-major k x k; empty classes are missing
  std::vector<std::size_t> steps;

  std::optional<double> at(std::size_t i, std::size_t j) const { return values[i * num_classes + j]; }
  double diagonal_mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < num_classes; ++i)
      if (auto v = at(i, i)) s += *v, ++n;
    return n ? s / static_cast<double>(n) : std::nan("");
  }
  double off_diagonal_mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < num_classes; ++i)
      for (std::size_t j = 0; j < num_classes; ++j)
        if (i != j)
          if (auto v = at(i, j)) s += *v, ++n;
    return n ? s / static_cast<double>(n) : std::nan("");
  }
};

/// Entry (i, j): mean over probe steps and over training examples x of class j
/// of ||d L_t(y=i) / d x||_1, where L_t(y=i) is the mean loss of the examples
/// whose effective label is i. The training set doubles as the evaluation set.
inline ClassSensitivityMatrix class_sensitivity(const Dataset& d, const TrainConfig& cfg, std::size_t T,
                                                std::size_t num_classes, std::vector<std::size_t> probe_steps = {},
                                                const UnrollOptions& opts = {}) {
  if (num_classes < 1) throw ArgumentError("class_sensitivity: num_classes must be >= 1");
  if (probe_steps.empty() && T >= 1) probe_steps = default_probe_steps(T);
  std::vector<std::uint32_t> cls(d.size());
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    cls[i] = d.examples[i].effective_label;
    if (cls[i] >= num_classes) throw ArgumentError("class_sensitivity: label exceeds num_classes");
    ++count[cls[i]];
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < num_classes; ++c)
    if (count[c]) present.push_back(c);

  std::vector<Tensor> weights;
  for (auto c : present) {
    Tensor w(Shape{d.size()});
    for (std::size_t i = 0; i < d.size(); ++i)
      if (cls[i] == c) w[i] = 1.0 / static_cast<double>(count[c]);
    weights.push_back(std::move(w));
  }

  std::vector<double> acc(num_classes * num_classes, 0.0);
  const auto labels = d.labels();
  unroll_input_gradients(
      d, cfg, T, probe_steps, opts,
      [&](const std::vector<Var>& params, const Var& X) {
        Var ce = cross_entropy(forward(params, X, Mode::eval, RegularizerSpec::none(), nullptr), labels);
        std::vector<Var> objs;
        for (const auto& w : weights) objs.push_back(dot(ce, constant(w)));
        return objs;
      },
      [&](std::size_t, std::size_t o, const Tensor& gx) {
        const std::size_t i = present[o];
        for (std::size_t x = 0; x < d.size(); ++x)
          acc[i * num_classes + cls[x]] += norm(gx.row(x), NormKind::l1) / static_cast<double>(count[cls[x]]);
      });

  ClassSensitivityMatrix m;
  m.num_classes = num_classes;
  m.steps = probe_steps;
  m.values.resize(num_classes * num_classes);
  for (std::size_t i = 0; i < num_classes; ++i)
    for (std::size_t j = 0; j < num_classes; ++j)
      if (count[i] && count[j]) m.values[i * num_classes + j] = acc[i * num_classes + j] / static_cast<double>(probe_steps.size());
  return m;
}

/// Columns: step,example_index,g_value
inline io::CsvWriter sensitivity_csv(const SensitivityRecord& rec) {
  io::CsvWriter csv({"step", "example_index", "g_value"});
  for (std::size_t p = 0; p < rec.steps.size(); ++p)
    for (std::size_t i = 0; i < rec.num_examples; ++i) csv.row(rec.steps[p], i, rec.per_step[p][i]);
  return csv;
}

/// Columns: i,j,value (value "NA" for a missing class)
inline io::CsvWriter class_matrix_csv(const ClassSensitivityMatrix& m) {
  io::CsvWriter csv({"i", "j", "value"});
  for (std::size_t i = 0; i < m.num_classes; ++i)
    for (std::size_t j = 0; j < m.num_classes; ++j) {
      if (auto v = m.at(i, j))
        csv.row(i, j, *v);
      else
        csv.row(i, j, "NA");
    }
  return csv;
}

}  // namespace memo
