#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "memo/autodiff.hpp"
#include "memo/data.hpp"
#include "memo/errors.hpp"
#include "memo/io.hpp"
#include "memo/lass.hpp"
#include "memo/mlp.hpp"
#include "memo/rng.hpp"

namespace memo {

struct TrainConfig {
  std::vector<std::size_t> hidden_sizes{4096, 4096};
  double learning_rate = 0.01;
  double momentum = 0.0;
  std::size_t batch_size = 100;
  std::size_t epochs = 1000;
  std::uint64_t seed = 0;
  RegularizerSpec regularizer;
  std::size_t lr_halving_epochs = 0;     ///< halve the rate every this many epochs; 0 = constant
  std::size_t snapshot_every_epochs = 0; ///< 0 = initial and final only
  std::size_t snapshot_every_steps = 0;  ///< 0 = none beyond the epoch cadence
  bool stop_at_full_train_accuracy = false;
  LassConfig adversarial_search;         ///< used by the adversarial regularizer

  void validate() const {
    if (!(learning_rate > 0.0) && learning_rate != 0.0) throw ArgumentError("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must be in [0, 1)");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    regularizer.validate();
  }
};

inline void to_json(nlohmann::json& j, const RegularizerSpec& r) {
  j = {{"kind", to_string(r.kind)}, {"value", r.value}, {"dropout", r.dropout}};
}
inline void from_json(const nlohmann::json& j, RegularizerSpec& r) {
  r.kind = parse_reg_kind(j.at("kind").get<std::string>());
  r.value = j.at("value").get<double>();
  r.dropout = j.value("dropout", 0.0);
}
inline void to_json(nlohmann::json& j, const LassConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"radius", c.radius},
       {"max_iter", c.max_iter},
       {"seed", c.seed},
       {"clamp_to_domain", c.clamp_to_domain},
       {"domain_lo", c.domain_lo},
       {"domain_hi", c.domain_hi},
       {"rule", c.rule == GradientRule::predicted_class_loss ? "predicted_class_loss" : "raw_logit_at_start"}};
}
inline void from_json(const nlohmann::json& j, LassConfig& c) {
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.radius = j.at("radius").get<double>();
  c.max_iter = j.at("max_iter").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.clamp_to_domain = j.at("clamp_to_domain").get<bool>();
  c.domain_lo = j.at("domain_lo").get<double>();
  c.domain_hi = j.at("domain_hi").get<double>();
  c.rule = j.at("rule").get<std::string>() == "raw_logit_at_start" ? GradientRule::raw_logit_at_start
                                                                   : GradientRule::predicted_class_loss;
}
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"hidden_sizes", c.hidden_sizes},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"regularizer", c.regularizer},
       {"lr_halving_epochs", c.lr_halving_epochs},
       {"snapshot_every_epochs", c.snapshot_every_epochs},
       {"snapshot_every_steps", c.snapshot_every_steps},
       {"stop_at_full_train_accuracy", c.stop_at_full_train_accuracy},
       {"adversarial_search", c.adversarial_search}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.hidden_sizes = j.at("hidden_sizes").get<std::vector<std::size_t>>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.regularizer = j.at("regularizer").get<RegularizerSpec>();
  c.lr_halving_epochs = j.at("lr_halving_epochs").get<std::size_t>();
  c.snapshot_every_epochs = j.at("snapshot_every_epochs").get<std::size_t>();
  c.snapshot_every_steps = j.at("snapshot_every_steps").get<std::size_t>();
  c.stop_at_full_train_accuracy = j.at("stop_at_full_train_accuracy").get<bool>();
  c.adversarial_search = j.at("adversarial_search").get<LassConfig>();
}

using BatchSchedule = std::vector<std::vector<std::uint32_t>>;

/// Per-epoch shuffled minibatches for `epochs` epochs over n examples. The
/// final batch of an epoch may be short.
inline BatchSchedule make_batch_schedule(std::size_t n, std::size_t batch_size, std::size_t epochs, std::uint64_t seed) {
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  Rng rng(derive_seed(seed, "shuffle"));
  BatchSchedule s;
  for (std::size_t e = 0; e < epochs; ++e) {
    auto perm = detail::permutation(n, rng);
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      s.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return s;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

inline double learning_rate_at_epoch(const TrainConfig& c, std::size_t epoch) {
  if (c.lr_halving_epochs == 0 || epoch == 0) return c.learning_rate;
  return c.learning_rate * std::pow(0.5, static_cast<double>((epoch - 1) / c.lr_halving_epochs));
}

/// Parameters and momentum buffers as graph values.
struct SgdState {
  std::vector<Var> params;
  std::vector<Var> velocity;
};

struct SgdStepResult {
  SgdState next;
  Var loss;
};

/// One SGD-with-momentum update as a graph expression:
///   g  = grad_theta[ mean batch loss ] (+ lambda * theta for weight decay)
///   v' = momentum * v + g
///   theta' = theta - lr * v'
/// With create_graph the update is recorded so later losses can be
/// differentiated through it; otherwise the new state is untracked.
/// For the adversarial regularizer the loss is (1-w)*clean + w*loss on
/// `adversarial_inputs`, which must then be supplied.
inline SgdStepResult sgd_step_expr(Graph& graph, const SgdState& state, const Var& batch_inputs,
                                   const std::vector<std::uint32_t>& batch_labels, double lr, double momentum,
                                   const RegularizerSpec& reg, Rng* rng, bool create_graph, std::size_t step_index,
                                   const Tensor* adversarial_inputs = nullptr) {
  if (batch_labels.empty()) throw ArgumentError("sgd_step: empty batch");
  Var loss = mean(cross_entropy(forward(state.params, batch_inputs, Mode::train, reg, rng), batch_labels));
  if (reg.kind == RegKind::adversarial) {
    if (adversarial_inputs == nullptr) throw ArgumentError("sgd_step: adversarial regularizer needs adversarial inputs");
    Var adv = mean(cross_entropy(forward(state.params, constant(*adversarial_inputs), Mode::train, reg, rng), batch_labels));
    loss = add(scale(loss, 1.0 - reg.value), scale(adv, reg.value));
  }
  std::vector<Var> grads = graph.gradient(loss, state.params, create_graph);

  Graph::Pause mode(graph, create_graph);
  SgdStepResult out;
  out.loss = loss;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Var g = grads[i];
    if (reg.kind == RegKind::weight_decay) g = add(g, scale(state.params[i], reg.value));
    if (!g.value().all_finite())
      throw NonFiniteError("non-finite gradient at step " + std::to_string(step_index) + " (parameter tensor " +
                           std::to_string(i) + ")");
    Var v = add(scale(state.velocity[i], momentum), g);
    out.next.params.push_back(sub(state.params[i], scale(v, lr)));
    out.next.velocity.push_back(std::move(v));
  }
  return out;
}

/// Numeric SGD step on concrete parameters.
inline std::pair<MLPParams, std::vector<Tensor>> sgd_step(const MLPParams& params, const std::vector<Tensor>& velocity,
                                                          const Tensor& batch_inputs,
                                                          const std::vector<std::uint32_t>& batch_labels, double lr,
                                                          double momentum, const RegularizerSpec& reg, Rng& rng,
                                                          std::size_t step_index = 0,
                                                          const Tensor* adversarial_inputs = nullptr) {
  Graph g;
  SgdState s;
  for (const auto& t : params.tensors) s.params.push_back(g.leaf(t));
  for (const auto& t : velocity) s.velocity.push_back(constant(t));
  auto r = sgd_step_expr(g, s, constant(batch_inputs), batch_labels, lr, momentum, reg, &rng, false, step_index,
                         adversarial_inputs);
  std::pair<MLPParams, std::vector<Tensor>> out;
  for (std::size_t i = 0; i < r.next.params.size(); ++i) {
    out.first.tensors.push_back(r.next.params[i].value());
    out.second.push_back(r.next.velocity[i].value());
  }
  return out;
}

/// Gradient of the weight-decay penalty alone (data loss detached): lambda * theta.
inline std::vector<Tensor> weight_decay_gradient(const MLPParams& params, double lambda) {
  std::vector<Tensor> out;
  for (const auto& t : params.tensors) out.push_back(scale(constant(t), lambda).value());
  return out;
}

struct Snapshot {
  std::size_t step = 0;
  std::optional<std::size_t> epoch;  ///< set when taken at the end of an epoch (0 = initial)
  MLPParams params;
  std::vector<Tensor> velocity;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
  std::vector<bool> train_correct;
};

struct TrainTrace {
  TrainConfig config;
  std::size_t num_examples = 0;
  BatchSchedule batch_schedule;  ///< steps actually executed
  std::vector<Snapshot> snapshots;
  std::vector<EpochMetrics> per_epoch;

  const Snapshot& initial() const { return snapshots.front(); }
  const Snapshot& final() const { return snapshots.back(); }
  const Snapshot* at_epoch(std::size_t epoch) const {
    for (const auto& s : snapshots)
      if (s.epoch && *s.epoch == epoch) return &s;
    return nullptr;
  }
  std::size_t epochs_run() const { return per_epoch.size(); }
};

namespace detail {

inline Tensor gather(const Tensor& inputs, const std::vector<std::uint32_t>& idx) {
  const std::size_t d = inputs.dim(1);
  Tensor b(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = inputs.row(idx[i]);
    std::copy(src.begin(), src.end(), b.row(i).begin());
  }
  return b;
}

inline std::vector<std::uint32_t> pick(const std::vector<std::uint32_t>& labels, const std::vector<std::uint32_t>& idx) {
  std::vector<std::uint32_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

/// LASS critical samples for a batch; rows with no critical sample keep their clean input.
inline Tensor adversarial_batch(const MLPParams& params, const Tensor& batch, const LassConfig& cfg, std::size_t step) {
  std::vector<std::uint64_t> seeds(batch.dim(0));
  for (std::size_t r = 0; r < seeds.size(); ++r) seeds[r] = derive_seed(cfg.seed, "adversarial", step * 1000003ULL + r);
  auto res = lass_search_batch(mlp_classifier(params), batch, cfg, seeds);
  Tensor out = batch;
  for (std::size_t r = 0; r < res.size(); ++r)
    if (res[r].found) std::copy(res[r].x_hat->begin(), res[r].x_hat->end(), out.row(r).begin());
  return out;
}

struct Replayer {
  const TrainConfig& cfg;
  Tensor inputs;
  std::vector<std::uint32_t> labels;
  Rng reg_rng;

  Replayer(const TrainConfig& c, const Dataset& d)
      : cfg(c), inputs(d.input_matrix()), labels(d.labels()), reg_rng(derive_seed(c.seed, "regularizer")) {}

  double step(MLPParams& params, std::vector<Tensor>& velocity, const std::vector<std::uint32_t>& idx, double lr,
              std::size_t step_index) {
    const Tensor batch = gather(inputs, idx);
    std::optional<Tensor> adv;
    if (cfg.regularizer.kind == RegKind::adversarial)
      adv = adversarial_batch(params, batch, cfg.adversarial_search, step_index);
    Graph g;
    SgdState s;
    for (const auto& t : params.tensors) s.params.push_back(g.leaf(t));
    for (const auto& t : velocity) s.velocity.push_back(constant(t));
    auto r = sgd_step_expr(g, s, constant(batch), pick(labels, idx), lr, cfg.momentum, cfg.regularizer, &reg_rng,
                           false, step_index, adv ? &*adv : nullptr);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      params.tensors[i] = r.next.params[i].value();
      velocity[i] = r.next.velocity[i].value();
    }
    return r.loss.value().item();
  }
};

}  // namespace detail

/// Shuffled minibatch SGD for config.epochs epochs (or until 100% train
/// accuracy when stop_at_full_train_accuracy is set).
inline TrainTrace train(const Dataset& dataset, const Dataset* validation, const TrainConfig& config) {
  config.validate();
  if (dataset.size() == 0) throw ArgumentError("train: empty dataset");
  for (const auto& e : dataset.examples)
    if (e.effective_label >= dataset.num_classes) throw ArgumentError("train: label out of range");

  TrainTrace trace;
  trace.config = config;
  trace.num_examples = dataset.size();
  MLPParams params = init_params(config.hidden_sizes, dataset.input_dim(), dataset.num_classes, config.seed);
  std::vector<Tensor> velocity;
  for (const auto& t : params.tensors) velocity.push_back(Tensor::zeros_like(t));
  trace.snapshots.push_back({0, 0, params, velocity});

  const std::size_t per_epoch = steps_per_epoch(dataset.size(), config.batch_size);
  const BatchSchedule schedule = make_batch_schedule(dataset.size(), config.batch_size, config.epochs, config.seed);
  detail::Replayer rep(config, dataset);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = learning_rate_at_epoch(config, epoch);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const auto& idx = schedule[step];
      loss_sum += rep.step(params, velocity, idx, lr, step + 1);
      trace.batch_schedule.push_back(idx);
      if (config.snapshot_every_steps && (step + 1) % config.snapshot_every_steps == 0 && s + 1 < per_epoch)
        trace.snapshots.push_back({step + 1, std::nullopt, params, velocity});
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(per_epoch);
    auto ev = evaluate(params, dataset);
    m.train_accuracy = ev.accuracy;
    m.train_correct = std::move(ev.correct);
    if (validation != nullptr && validation->size() > 0) m.val_accuracy = evaluate(params, *validation).accuracy;
    trace.per_epoch.push_back(std::move(m));

    const bool last = epoch == config.epochs ||
                      (config.stop_at_full_train_accuracy && trace.per_epoch.back().train_accuracy == 1.0);
    const bool cadence = (config.snapshot_every_epochs && epoch % config.snapshot_every_epochs == 0) ||
                         (config.snapshot_every_steps && step % config.snapshot_every_steps == 0);
    if (cadence || last) trace.snapshots.push_back({step, epoch, params, velocity});
    if (last) break;
  }
  return trace;
}

/// Re-executes the recorded batch schedule from the initial snapshot and
/// returns snapshots at the same steps as the trace.
inline std::vector<Snapshot> replay(const TrainTrace& trace, const Dataset& dataset) {
  if (dataset.size() != trace.num_examples) throw ArgumentError("replay: dataset size differs from the trace");
  detail::Replayer rep(trace.config, dataset);
  MLPParams params = trace.initial().params;
  std::vector<Tensor> velocity = trace.initial().velocity;
  std::vector<Snapshot> out{trace.initial()};
  const std::size_t per_epoch = steps_per_epoch(dataset.size(), trace.config.batch_size);
  std::size_t next = 1;
  for (std::size_t step = 0; step < trace.batch_schedule.size(); ++step) {
    const std::size_t epoch = step / per_epoch + 1;
    rep.step(params, velocity, trace.batch_schedule[step], learning_rate_at_epoch(trace.config, epoch), step + 1);
    while (next < trace.snapshots.size() && trace.snapshots[next].step == step + 1) {
      out.push_back({step + 1, trace.snapshots[next].epoch, params, velocity});
      ++next;
    }
  }
  return out;
}

struct Convergence {
  bool converged = false;
  std::size_t epochs = 0;  ///< first 1-based epoch at 100% train accuracy, else the epoch budget
};

inline Convergence time_to_convergence(const TrainTrace& trace) {
  for (const auto& m : trace.per_epoch)
    if (m.train_accuracy == 1.0) return {true, m.epoch};
  return {false, trace.config.epochs};
}

// ---------------------------------------------------------------------------
// Trace container (little-endian):
//   "MTTR" | u32 version=1 | str config-json | u64 num_examples
//   | u64 steps, then per step: u32 count, u32 idx[count]
//   | u64 snapshots, then per snapshot: u64 step | i64 epoch (-1 = none)
//       | u32 tensors | tensor... | u32 velocity tensors | tensor...
//   | u64 epochs, then per epoch: u64 epoch | f64 loss | f64 train acc
//       | f64 val acc (NaN = none) | u64 bits | u8 packed[(bits+7)/8]
// Tensors: u32 rank | u64 dims[rank] | f64 data[]

inline std::string serialize(const TrainTrace& t) {
  io::Writer w;
  w.bytes("MTTR");
  w.u32(1);
  w.str(nlohmann::json(t.config).dump());
  w.u64(t.num_examples);
  w.u64(t.batch_schedule.size());
  for (const auto& b : t.batch_schedule) {
    w.u32(static_cast<std::uint32_t>(b.size()));
    for (auto i : b) w.u32(i);
  }
  w.u64(t.snapshots.size());
  for (const auto& s : t.snapshots) {
    w.u64(s.step);
    w.i64(s.epoch ? static_cast<std::int64_t>(*s.epoch) : -1);
    w.u32(static_cast<std::uint32_t>(s.params.tensors.size()));
    for (const auto& x : s.params.tensors) w.tensor(x);
    w.u32(static_cast<std::uint32_t>(s.velocity.size()));
    for (const auto& x : s.velocity) w.tensor(x);
  }
  w.u64(t.per_epoch.size());
  for (const auto& m : t.per_epoch) {
    w.u64(m.epoch);
    w.f64(m.train_loss);
    w.f64(m.train_accuracy);
    w.f64(m.val_accuracy.value_or(std::numeric_limits<double>::quiet_NaN()));
    w.u64(m.train_correct.size());
    for (std::size_t i = 0; i < m.train_correct.size(); i += 8) {
      std::uint8_t byte = 0;
      for (std::size_t b = 0; b < 8 && i + b < m.train_correct.size(); ++b) byte |= m.train_correct[i + b] << b;
      w.u8(byte);
    }
  }
  return w.data();
}

inline TrainTrace deserialize_trace(std::vector<unsigned char> bytes, const std::string& source = "trace") {
  io::Reader r(std::move(bytes), source);
  if (r.bytes(4) != "MTTR") throw FormatError(source + ": not a training trace");
  if (const auto v = r.u32(); v != 1) throw FormatError(source + ": unsupported version " + std::to_string(v));
  TrainTrace t;
  t.config = nlohmann::json::parse(r.str()).get<TrainConfig>();
  t.num_examples = r.u64();
  t.batch_schedule.resize(r.u64());
  for (auto& b : t.batch_schedule) {
    b.resize(r.u32());
    for (auto& i : b) i = r.u32();
  }
  t.snapshots.resize(r.u64());
  for (auto& s : t.snapshots) {
    s.step = r.u64();
    const auto e = r.i64();
    if (e >= 0) s.epoch = static_cast<std::size_t>(e);
    s.params.tensors.resize(r.u32());
    for (auto& x : s.params.tensors) x = r.tensor();
    s.velocity.resize(r.u32());
    for (auto& x : s.velocity) x = r.tensor();
  }
  t.per_epoch.resize(r.u64());
  for (auto& m : t.per_epoch) {
    m.epoch = r.u64();
    m.train_loss = r.f64();
    m.train_accuracy = r.f64();
    const double va = r.f64();
    if (!std::isnan(va)) m.val_accuracy = va;
    m.train_correct.resize(r.u64());
    for (std::size_t i = 0; i < m.train_correct.size(); i += 8) {
      const auto byte = r.u8();
      for (std::size_t b = 0; b < 8 && i + b < m.train_correct.size(); ++b) m.train_correct[i + b] = (byte >> b) & 1;
    }
  }
  return t;
}

/// Per-epoch metrics as JSON rows (the human-readable sidecar of a trace).
inline std::string metrics_json(const TrainTrace& t) {
  nlohmann::json j;
  j["config"] = t.config;
  j["num_examples"] = t.num_examples;
  auto& rows = j["epochs"] = nlohmann::json::array();
  for (const auto& m : t.per_epoch) {
    nlohmann::json row{{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"train_accuracy", m.train_accuracy}};
    row["val_accuracy"] = m.val_accuracy ? nlohmann::json(*m.val_accuracy) : nlohmann::json(nullptr);
    rows.push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

inline void save_trace(const TrainTrace& t, const std::filesystem::path& path) {
  io::write_file(path, serialize(t));
  auto sidecar = path;
  sidecar += ".json";
  io::write_file(sidecar, metrics_json(t));
}

inline TrainTrace load_trace(const std::filesystem::path& path) { return deserialize_trace(io::read_file(path), path.string()); }

/// Parameter tensors in the same container the trace uses: "MTNS" | u32 count | tensor...
inline void save_params(const MLPParams& p, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes("MTNS");
  w.u32(static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& t : p.tensors) w.tensor(t);
  io::write_file(path, w.data());
}

inline MLPParams load_params(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  if (r.bytes(4) != "MTNS") throw FormatError(path.string() + ": not a parameter file");
  MLPParams p;
  p.tensors.resize(r.u32());
  for (auto& t : p.tensors) t = r.tensor();
  return p;
}

}  // namespace memo
