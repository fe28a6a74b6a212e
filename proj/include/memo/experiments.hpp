#pragma once

// Desk-scale experiment runners. Each runner reads a flat Config, writes its
// CSV artifacts and a manifest.json into the output directory, and returns the
// numbers it wrote.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "memo/csr.hpp"
#include "memo/data.hpp"
#include "memo/errors.hpp"
#include "memo/io.hpp"
#include "memo/lass.hpp"
#include "memo/mlp.hpp"
#include "memo/sensitivity.hpp"
#include "memo/train.hpp"
#include "memo/version.hpp"

namespace memo {

// ---------------------------------------------------------------------------
// Config: "key = value" lines, "[section]" prefixes following keys with
// "section.", '#' or ';' start a comment line.

class Config {
 public:
  static Config parse(std::string_view text, const std::string& source = "config") {
    Config c;
    std::string section;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw FormatError(source + ":" + std::to_string(lineno) + ": unterminated section");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw FormatError(source + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw FormatError(source + ":" + std::to_string(lineno) + ": empty key");
      if (!section.empty()) key = section + "." + key;
      c.values_[key] = trim(t.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse(std::string(bytes.begin(), bytes.end()), path.string());
  }

  /// "key=value" as given on the command line.
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ArgumentError("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ArgumentError("missing config key '" + key + "'");
    return it->second;
  }
  double num(const std::string& key) const { return to_double(key, str(key)); }
  std::uint64_t u64(const std::string& key) const { return to_u64(key, str(key)); }
  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }
  bool flag(const std::string& key) const {
    const auto v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ArgumentError("config key '" + key + "': expected a boolean, got '" + v + "'");
  }
  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    for (std::string item; std::getline(ss, item, ',');)
      if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
  }
  std::vector<double> nums(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) out.push_back(to_double(key, s));
    return out;
  }
  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& s : list(key)) out.push_back(static_cast<std::size_t>(to_u64(key, s)));
    return out;
  }

  /// Overrides from `over`; every key must already exist here.
  void overlay(const Config& over, const std::string& what) {
    for (const auto& [k, v] : over.values_) {
      if (!has(k)) throw ArgumentError("unknown config key '" + k + "' in " + what);
      values_[k] = v;
    }
  }

  std::string dump() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
      throw ArgumentError("config key '" + key + "': expected a number, got '" + v + "'");
    return out;
  }
  static std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
      throw ArgumentError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
};

enum class ExperimentKind : std::uint8_t {
  easy_hard,
  gini_curve,
  class_matrix,
  capacity_sweep,
  ttc_sweep,
  csr_curve,
  noise_level_grid,
  reg_sweep,
  dump_filters,
};

inline const std::vector<ExperimentKind>& all_experiments() {
  static const std::vector<ExperimentKind> k{ExperimentKind::easy_hard,      ExperimentKind::gini_curve,
                                             ExperimentKind::class_matrix,   ExperimentKind::capacity_sweep,
                                             ExperimentKind::ttc_sweep,      ExperimentKind::csr_curve,
                                             ExperimentKind::noise_level_grid, ExperimentKind::reg_sweep,
                                             ExperimentKind::dump_filters};
  return k;
}

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::easy_hard: return "easy_hard";
    case ExperimentKind::gini_curve: return "gini_curve";
    case ExperimentKind::class_matrix: return "class_matrix";
    case ExperimentKind::capacity_sweep: return "capacity_sweep";
    case ExperimentKind::ttc_sweep: return "ttc_sweep";
    case ExperimentKind::csr_curve: return "csr_curve";
    case ExperimentKind::noise_level_grid: return "noise_level_grid";
    case ExperimentKind::reg_sweep: return "reg_sweep";
    case ExperimentKind::dump_filters: return "dump_filters";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : all_experiments())
    if (s == to_string(k)) return k;
  throw ArgumentError("unknown experiment '" + s + "'");
}

/// Every key an experiment reads, with its desk-scale default.
inline Config default_config(ExperimentKind kind) {
  Config c;
  auto set = [&](const char* k, const char* v) { c.set(k, v); };
  set("seed", "0");
  set("workers", "1");
  set("data.subset", "1000");
  set("data.downscale", "true");
  set("data.val_subset", "1000");
  set("train.hidden", "16,16");
  set("train.lr", "0.01");
  set("train.momentum", "0.9");
  set("train.batch_size", "32");
  set("train.epochs", "100");
  set("train.lr_halving_epochs", "0");
  set("lass.alpha", "0.25");
  set("lass.beta", "0.2");
  set("lass.radius", "0.3");
  set("lass.max_iter", "100");
  set("lass.clamp", "true");
  set("lass.rule", "predicted_class_loss");
  switch (kind) {
    case ExperimentKind::easy_hard:
      set("data.downscale", "false");
      set("train.hidden", "256,256");
      set("train.momentum", "0");
      set("train.batch_size", "10");
      set("train.epochs", "1");
      set("easy_hard.runs", "100");
      set("easy_hard.variants", "real,randX,randY");
      break;
    case ExperimentKind::gini_curve:
      set("train.lr", "0.05");
      set("train.momentum", "0");
      set("train.batch_size", "10");
      set("gini.T", "500");
      set("gini.probe_every", "10");
      set("gini.variants", "real,randX");
      set("gini.unique_class", "false");
      set("gini.norm", "l1");
      set("gini.checkpoint_interval", "0");
      set("gini.memory_budget_mb", "2048");
      set("gini.dump_sensitivity", "true");
      break;
    case ExperimentKind::class_matrix:
      set("train.lr", "0.05");
      set("train.momentum", "0");
      set("train.batch_size", "10");
      set("class.T", "500");
      set("class.probe_every", "50");
      set("class.variants", "real,randX");
      break;
    case ExperimentKind::capacity_sweep:
      set("train.epochs", "50");
      set("capacity.hidden_grid", "16,64,256,1024");
      set("capacity.noise_grid", "0,0.5");
      set("capacity.noise_kind", "randX");
      break;
    case ExperimentKind::ttc_sweep:
      set("train.hidden", "32,32");
      set("train.epochs", "400");
      set("ttc.axis", "size");
      set("ttc.grid", "1000,2000,4000");
      set("ttc.noise_levels", "0,1");
      set("ttc.fixed_hidden", "32");
      set("ttc.fixed_size", "1000");
      break;
    case ExperimentKind::csr_curve:
    case ExperimentKind::noise_level_grid:
      set("train.hidden", "128,128");
      set("data.val_subset", "500");
      set("lass.radius", "0.05");
      set("csr.every", "5");
      if (kind == ExperimentKind::csr_curve) {
        set("csr.variants", "real,randX,randY");
      } else {
        set("noise.kind", "randY");
        set("noise.fractions", "0.2,0.4,0.6,0.8");
      }
      break;
    case ExperimentKind::reg_sweep:
      set("train.hidden", "128,128");
      set("reg.kinds", "dropout,input_dropout,input_gaussian,hidden_gaussian,weight_decay");
      set("reg.dropout", "0.18,0.36,0.54,0.72,0.9");
      set("reg.input_dropout", "0.18,0.36,0.54,0.72,0.9");
      set("reg.input_gaussian", "1,2,3,4,5");
      set("reg.hidden_gaussian", "0.06,0.12,0.18,0.24,0.3");
      set("reg.weight_decay", "0.2,0.4,0.6,0.8,1");
      set("reg.adversarial", "0.2,0.45,0.7");
      set("reg.adversarial_dropout", "0.03");
      break;
    case ExperimentKind::dump_filters:
      set("data.downscale", "false");
      set("train.hidden", "64,64");
      set("train.epochs", "20");
      set("filters.variants", "real,randX");
      set("filters.params", "");
      break;
  }
  return c;
}

/// defaults < file < flags
inline Config resolve_config(ExperimentKind kind, const std::optional<Config>& file, const Config& flags) {
  Config c = default_config(kind);
  if (file) c.overlay(*file, "config file");
  c.overlay(flags, "command-line flags");
  return c;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.hidden_sizes = c.counts("train.hidden");
  t.learning_rate = c.num("train.lr");
  t.momentum = c.num("train.momentum");
  t.batch_size = c.count("train.batch_size");
  t.epochs = c.count("train.epochs");
  t.lr_halving_epochs = c.count("train.lr_halving_epochs");
  t.adversarial_search = LassConfig{};
  t.validate();
  return t;
}

inline LassConfig lass_config_from(const Config& c) {
  LassConfig l;
  l.alpha = c.num("lass.alpha");
  l.beta = c.num("lass.beta");
  l.radius = c.num("lass.radius");
  l.max_iter = c.count("lass.max_iter");
  l.clamp_to_domain = c.flag("lass.clamp");
  const auto rule = c.str("lass.rule");
  if (rule == "predicted_class_loss")
    l.rule = GradientRule::predicted_class_loss;
  else if (rule == "raw_logit_at_start")
    l.rule = GradientRule::raw_logit_at_start;
  else
    throw ArgumentError("lass.rule must be predicted_class_loss or raw_logit_at_start");
  l.validate();
  return l;
}

// ---------------------------------------------------------------------------
// Worker pool: cells run concurrently, outcomes come back in cell order.

template <class R>
struct CellOutcome {
  std::optional<R> value;
  std::string error;
};

template <class R>
std::vector<CellOutcome<R>> run_cells(std::size_t n, std::size_t workers, const std::function<R(std::size_t)>& cell) {
  std::vector<CellOutcome<R>> out(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        out[i].value = cell(i);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ExperimentContext {
  Config config;
  const MnistSplits* data = nullptr;
  std::filesystem::path out;
  std::vector<std::filesystem::path> written;  ///< relative to out

  std::uint64_t seed() const { return config.u64("seed"); }
  std::size_t workers() const { return config.count("workers"); }

  void save(const std::string& rel, std::string_view bytes) {
    io::write_file(out / rel, bytes);
    if (std::find(written.begin(), written.end(), rel) == written.end()) written.emplace_back(rel);
  }
  void save(const std::string& rel, const io::CsvWriter& csv) { save(rel, csv.str()); }
};

inline Dataset training_pool(const ExperimentContext& ctx) {
  if (ctx.data == nullptr) throw ArgumentError("experiment: no dataset loaded");
  return ctx.config.flag("data.downscale") ? downscale(ctx.data->train) : ctx.data->train;
}

inline Dataset base_training_set(const ExperimentContext& ctx, std::size_t n) {
  return subset(training_pool(ctx), n, derive_seed(ctx.seed(), "data/subset"));
}

/// Held-out split, never noised.
inline Dataset validation_set(const ExperimentContext& ctx) {
  if (ctx.data == nullptr || !ctx.data->validation) throw ArgumentError("experiment: validation split (t10k files) missing");
  Dataset v = ctx.config.flag("data.downscale") ? downscale(*ctx.data->validation) : *ctx.data->validation;
  const std::size_t n = ctx.config.count("data.val_subset");
  if (n < v.size()) v = subset(v, n, derive_seed(ctx.seed(), "data/validation"));
  return v;
}

/// "real", "randX" or "randY" (all examples noised), or "randX@f" / "randY@f".
inline Dataset make_variant(const Dataset& base, const std::string& variant, std::uint64_t seed) {
  const auto at = variant.find('@');
  const std::string kind = variant.substr(0, at);
  const double f = at == std::string::npos ? 1.0 : std::stod(variant.substr(at + 1));
  const std::uint64_t s = derive_seed(seed, "noise/" + kind);
  if (kind == "real") return base;
  if (kind == "randX") return inject_input_noise(base, f, s);
  if (kind == "randY") return inject_label_noise(base, f, s);
  throw ArgumentError("unknown dataset variant '" + variant + "' (expected real, randX or randY)");
}

inline double variance(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

inline double best_val_accuracy(const TrainTrace& t) {
  double best = 0.0;
  for (const auto& m : t.per_epoch)
    if (m.val_accuracy) best = std::max(best, *m.val_accuracy);
  return best;
}

/// count draws of Binomial(n, p) / n.
inline std::vector<double> binomial_reference(std::size_t n, double p, std::size_t count, std::uint64_t seed) {
  if (n < 1) throw ArgumentError("binomial_reference: n must be >= 1");
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("binomial_reference: p must be in [0, 1]");
  Rng rng(derive_seed(seed, "binomial"));
  std::binomial_distribution<std::uint64_t> dist(n, p);
  std::vector<double> out(count);
  for (auto& v : out) v = static_cast<double>(dist(rng.engine())) / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

inline void write_manifest(const ExperimentContext& ctx, ExperimentKind kind, double seconds) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& rel : ctx.written)
    files.push_back({{"path", rel.generic_string()},
                     {"fnv1a64", io::file_hash(ctx.out / rel)},
                     {"bytes", std::filesystem::file_size(ctx.out / rel)}});
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : ctx.config.values()) cfg[k] = v;
  nlohmann::json m{{"experiment", to_string(kind)},
                   {"version", kVersion},
                   {"config", cfg},
                   {"files", files},
                   {"duration_seconds", seconds}};
  io::write_file(ctx.out / "manifest.json", m.dump(2) + "\n");
}

/// Empty when every listed file exists with the recorded hash; otherwise one message per problem.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& manifest) {
  const auto bytes = io::read_file(manifest);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  std::vector<std::string> problems;
  const auto dir = manifest.parent_path();
  for (const auto& f : j.at("files")) {
    const auto path = dir / f.at("path").get<std::string>();
    if (!std::filesystem::exists(path))
      problems.push_back("missing " + path.string());
    else if (io::file_hash(path) != f.at("fnv1a64").get<std::string>())
      problems.push_back("hash mismatch " + path.string());
  }
  return problems;
}

// ---------------------------------------------------------------------------
// easy_hard: per-example misclassification rate after one epoch, over R runs.

struct EasyHardResult {
  std::vector<std::string> variants;
  std::vector<std::vector<double>> rates;  ///< [variant][example]
  std::vector<double> binomial;
  double p_correct_randx = std::nan("");
};

inline EasyHardResult run_easy_hard(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  EasyHardResult res;
  res.variants = c.list("easy_hard.variants");
  const std::size_t runs = c.count("easy_hard.runs");
  if (runs < 1) throw ArgumentError("easy_hard.runs must be >= 1");
  TrainConfig tc = train_config_from(c);
  tc.epochs = 1;
  const Dataset base = base_training_set(ctx, c.count("data.subset"));

  io::CsvWriter csv({"variant", "example_index", "misclassification_rate"});
  for (const auto& variant : res.variants) {
    const Dataset d = make_variant(base, variant, ctx.seed());
    auto outcomes = run_cells<std::vector<bool>>(runs, ctx.workers(), [&](std::size_t r) {
      TrainConfig t = tc;
      t.seed = derive_seed(ctx.seed(), "easy_hard/" + variant, r);
      return train(d, nullptr, t).per_epoch.front().train_correct;
    });
    std::vector<double> wrong(d.size(), 0.0);
    for (std::size_t r = 0; r < runs; ++r) {
      if (!outcomes[r].value) throw std::runtime_error("easy_hard run " + std::to_string(r) + ": " + outcomes[r].error);
      for (std::size_t i = 0; i < d.size(); ++i) wrong[i] += !(*outcomes[r].value)[i];
    }
    for (auto& w : wrong) w /= static_cast<double>(runs);
    for (std::size_t i = 0; i < d.size(); ++i) csv.row(variant, d.examples[i].index, wrong[i]);
    if (variant == "randX") {
      double m = 0.0;
      for (double w : wrong) m += 1.0 - w;
      res.p_correct_randx = m / static_cast<double>(wrong.size());
    }
    res.rates.push_back(std::move(wrong));
  }
  ctx.save("easy_hard.csv", csv);

  io::CsvWriter summary({"variant", "mean_rate", "variance"});
  for (std::size_t v = 0; v < res.variants.size(); ++v) {
    double m = 0.0;
    for (double x : res.rates[v]) m += x;
    summary.row(res.variants[v], m / static_cast<double>(res.rates[v].size()), variance(res.rates[v]));
  }
  if (!std::isnan(res.p_correct_randx)) {
    res.binomial = binomial_reference(runs, res.p_correct_randx, base.size(), derive_seed(ctx.seed(), "easy_hard/binomial"));
    io::CsvWriter b({"sample_index", "misclassification_rate"});
    for (std::size_t i = 0; i < res.binomial.size(); ++i) b.row(i, 1.0 - res.binomial[i]);
    ctx.save("binomial_reference.csv", b);
    std::vector<double> miss(res.binomial.size());
    for (std::size_t i = 0; i < miss.size(); ++i) miss[i] = 1.0 - res.binomial[i];
    summary.row(std::string("binomial"), 1.0 - res.p_correct_randx, variance(miss));
  }
  ctx.save("easy_hard_summary.csv", summary);
  return res;
}

// ---------------------------------------------------------------------------
// gini_curve: Gini of g^t_x over examples at each probe step.

struct GiniCurveResult {
  std::vector<std::string> variants;
  std::vector<std::vector<std::pair<std::size_t, double>>> curves;
};

inline UnrollOptions unroll_options_from(const Config& c, const std::string& prefix) {
  UnrollOptions o;
  if (c.has(prefix + ".checkpoint_interval")) {
    o.checkpoint_interval = c.count(prefix + ".checkpoint_interval");
    if (o.checkpoint_interval > 0) o.retention = Retention::checkpointed;
  }
  if (c.has(prefix + ".memory_budget_mb")) o.memory_budget_bytes = c.count(prefix + ".memory_budget_mb") << 20;
  return o;
}

inline GiniCurveResult run_gini_curve(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  GiniCurveResult res;
  res.variants = c.list("gini.variants");
  TrainConfig tc = train_config_from(c);
  tc.seed = derive_seed(ctx.seed(), "gini/train");
  const std::size_t T = c.count("gini.T");
  const auto probes = default_probe_steps(T, std::max<std::size_t>(1, c.count("gini.probe_every")));
  const auto norm_kind = parse_norm_kind(c.str("gini.norm"));
  const bool unique = c.flag("gini.unique_class");
  const auto opts = unroll_options_from(c, "gini");
  const Dataset base = base_training_set(ctx, c.count("data.subset"));

  auto outcomes = run_cells<SensitivityRecord>(res.variants.size(), ctx.workers(), [&](std::size_t v) {
    Dataset d = make_variant(base, res.variants[v], ctx.seed());
    if (unique) d = unique_class_labels(d);
    return unrolled_loss_sensitivity(d, tc, T, probes, norm_kind, opts);
  });
  io::CsvWriter csv({"variant", "step", "gini"});
  for (std::size_t v = 0; v < res.variants.size(); ++v) {
    if (!outcomes[v].value) throw std::runtime_error("gini_curve " + res.variants[v] + ": " + outcomes[v].error);
    const auto& rec = *outcomes[v].value;
    res.curves.push_back(gini_curve(rec));
    for (const auto& [t, g] : res.curves.back()) csv.row(res.variants[v], t, g);
    if (c.flag("gini.dump_sensitivity")) ctx.save("sensitivity_" + res.variants[v] + ".csv", sensitivity_csv(rec));
  }
  ctx.save("gini_curve.csv", csv);
  return res;
}

// ---------------------------------------------------------------------------
// class_matrix

struct ClassMatrixResult {
  std::vector<std::string> variants;
  std::vector<ClassSensitivityMatrix> matrices;
};

inline ClassMatrixResult run_class_matrix(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  ClassMatrixResult res;
  res.variants = c.list("class.variants");
  TrainConfig tc = train_config_from(c);
  tc.seed = derive_seed(ctx.seed(), "class_matrix/train");
  const std::size_t T = c.count("class.T");
  const auto probes = default_probe_steps(T, std::max<std::size_t>(1, c.count("class.probe_every")));
  const Dataset base = base_training_set(ctx, c.count("data.subset"));
  auto outcomes = run_cells<ClassSensitivityMatrix>(res.variants.size(), ctx.workers(), [&](std::size_t v) {
    const Dataset d = make_variant(base, res.variants[v], ctx.seed());
    return class_sensitivity(d, tc, T, d.num_classes, probes);
  });
  for (std::size_t v = 0; v < res.variants.size(); ++v) {
    if (!outcomes[v].value) throw std::runtime_error("class_matrix " + res.variants[v] + ": " + outcomes[v].error);
    ctx.save("class_matrix_" + res.variants[v] + ".csv", class_matrix_csv(*outcomes[v].value));
    res.matrices.push_back(std::move(*outcomes[v].value));
  }
  return res;
}

// ---------------------------------------------------------------------------
// capacity_sweep

struct CapacityCell {
  double noise_fraction = 0.0;
  std::size_t hidden_units = 0;
  std::optional<double> best_val_acc;
  std::string error;
};

inline std::vector<CapacityCell> run_capacity_sweep(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  const auto hidden = c.counts("capacity.hidden_grid");
  const auto noise = c.nums("capacity.noise_grid");
  const auto kind = c.str("capacity.noise_kind");
  if (hidden.empty() || noise.empty()) throw ArgumentError("capacity grids must be nonempty");
  const TrainConfig tc = train_config_from(c);
  const std::size_t depth = std::max<std::size_t>(1, tc.hidden_sizes.size());
  const Dataset base = base_training_set(ctx, c.count("data.subset"));
  const Dataset val = validation_set(ctx);

  std::vector<CapacityCell> cells;
  for (double f : noise)
    for (auto h : hidden) cells.push_back({f, h, std::nullopt, {}});
  auto outcomes = run_cells<double>(cells.size(), ctx.workers(), [&](std::size_t i) {
    const Dataset d = make_variant(base, kind + "@" + io::fmt(cells[i].noise_fraction), ctx.seed());
    TrainConfig t = tc;
    t.hidden_sizes.assign(depth, cells[i].hidden_units);
    t.seed = derive_seed(ctx.seed(), "capacity/train");
    return best_val_accuracy(train(d, &val, t));
  });
  io::CsvWriter csv({"noise_fraction", "hidden_units", "best_val_acc"});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].best_val_acc = outcomes[i].value;
    cells[i].error = outcomes[i].error;
    if (cells[i].best_val_acc)
      csv.row(cells[i].noise_fraction, cells[i].hidden_units, *cells[i].best_val_acc);
    else
      csv.row(cells[i].noise_fraction, cells[i].hidden_units, "NA");
  }
  ctx.save("capacity_sweep.csv", csv);
  return cells;
}

// ---------------------------------------------------------------------------
// ttc_sweep

struct TtcCell {
  std::size_t axis_value = 0;
  double noise_level = 0.0;
  std::optional<Convergence> result;
  std::string error;
};

inline std::vector<TtcCell> run_ttc_sweep(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  const auto axis = c.str("ttc.axis");
  if (axis != "size" && axis != "capacity") throw ArgumentError("ttc.axis must be size or capacity");
  const auto grid = c.counts("ttc.grid");
  const auto levels = c.nums("ttc.noise_levels");
  if (grid.empty() || levels.empty()) throw ArgumentError("ttc grids must be nonempty");
  TrainConfig tc = train_config_from(c);
  tc.stop_at_full_train_accuracy = true;
  tc.seed = derive_seed(ctx.seed(), "ttc/train");
  const std::size_t depth = std::max<std::size_t>(1, tc.hidden_sizes.size());
  const Dataset pool = training_pool(ctx);

  std::vector<TtcCell> cells;
  for (double f : levels)
    for (auto a : grid) cells.push_back({a, f, std::nullopt, {}});
  auto outcomes = run_cells<Convergence>(cells.size(), ctx.workers(), [&](std::size_t i) {
    const std::size_t n = axis == "size" ? cells[i].axis_value : c.count("ttc.fixed_size");
    const std::size_t h = axis == "capacity" ? cells[i].axis_value : c.count("ttc.fixed_hidden");
    const Dataset base = subset(pool, n, derive_seed(ctx.seed(), "ttc/subset"));
    const Dataset d = make_variant(base, "randX@" + io::fmt(cells[i].noise_level), ctx.seed());
    TrainConfig t = tc;
    t.hidden_sizes.assign(depth, h);
    return time_to_convergence(train(d, nullptr, t));
  });
  const std::string fixed = axis == "size" ? "fixed_hidden_units=" + std::to_string(c.count("ttc.fixed_hidden"))
                                           : "fixed_dataset_size=" + std::to_string(c.count("ttc.fixed_size"));
  io::CsvWriter csv({"axis=" + axis, fixed, "epochs_to_converge=-1 means not converged within " +
                                                std::to_string(tc.epochs) + " epochs"},
                    {"axis_value", "noise_level", "epochs_to_converge"});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].result = outcomes[i].value;
    cells[i].error = outcomes[i].error;
    if (!cells[i].result)
      csv.row(cells[i].axis_value, cells[i].noise_level, "NA");
    else if (!cells[i].result->converged)
      csv.row(cells[i].axis_value, cells[i].noise_level, -1);
    else
      csv.row(cells[i].axis_value, cells[i].noise_level, cells[i].result->epochs);
  }
  ctx.save("ttc_sweep.csv", csv);
  return cells;
}

// ---------------------------------------------------------------------------
// csr_curve / noise_level_grid

struct CsrPoint {
  std::size_t epoch = 0;
  double csr = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct CsrSeries {
  std::string label;
  std::vector<CsrPoint> points;           ///< at the CSR cadence
  std::vector<EpochMetrics> per_epoch;    ///< every epoch (bitmaps dropped)
  std::string error;
};

namespace detail {

inline CsrSeries csr_series(const std::string& label, const Dataset& d, const Dataset& val, TrainConfig t,
                            const LassConfig& lc, std::size_t every) {
  t.snapshot_every_epochs = every;
  const TrainTrace trace = train(d, &val, t);
  CsrSeries s;
  s.label = label;
  for (auto& [epoch, rep] : csr_over_training(trace, val, lc, every)) {
    const auto& m = trace.per_epoch[epoch - 1];
    s.points.push_back({epoch, rep.csr, m.train_accuracy, m.val_accuracy.value_or(std::nan(""))});
  }
  for (const auto& m : trace.per_epoch) {
    EpochMetrics lite = m;
    lite.train_correct.clear();
    s.per_epoch.push_back(std::move(lite));
  }
  return s;
}

inline std::vector<CsrSeries> run_csr_series(ExperimentContext& ctx, const std::vector<std::string>& variants,
                                             const std::string& column, const std::vector<std::string>& labels,
                                             const std::string& stem) {
  const auto& c = ctx.config;
  TrainConfig tc = train_config_from(c);
  tc.seed = derive_seed(ctx.seed(), stem + "/train");
  const LassConfig lc = [&] {
    LassConfig l = lass_config_from(c);
    l.seed = derive_seed(ctx.seed(), stem + "/lass");
    return l;
  }();
  const std::size_t every = std::max<std::size_t>(1, c.count("csr.every"));
  const Dataset base = base_training_set(ctx, c.count("data.subset"));
  const Dataset val = validation_set(ctx);
  auto outcomes = run_cells<CsrSeries>(variants.size(), ctx.workers(), [&](std::size_t v) {
    return csr_series(labels[v], make_variant(base, variants[v], ctx.seed()), val, tc, lc, every);
  });
  std::vector<CsrSeries> out;
  io::CsvWriter csv({"epoch", column, "csr", "train_acc", "val_acc"});
  io::CsvWriter acc({column, "epoch", "train_loss", "train_acc", "val_acc"});
  for (std::size_t v = 0; v < variants.size(); ++v) {
    CsrSeries s = outcomes[v].value ? std::move(*outcomes[v].value) : CsrSeries{labels[v], {}, {}, outcomes[v].error};
    if (!s.error.empty()) csv.row(std::string("NA"), labels[v], "NA", "NA", "NA");
    for (const auto& p : s.points) csv.row(p.epoch, labels[v], p.csr, p.train_acc, p.val_acc);
    for (const auto& m : s.per_epoch)
      acc.row(labels[v], m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy.value_or(std::nan("")));
    out.push_back(std::move(s));
  }
  ctx.save(stem + ".csv", csv);
  ctx.save(stem + "_accuracy.csv", acc);
  return out;
}

}  // namespace detail

inline std::vector<CsrSeries> run_csr_curve(ExperimentContext& ctx) {
  const auto variants = ctx.config.list("csr.variants");
  return detail::run_csr_series(ctx, variants, "variant", variants, "csr_curve");
}

inline std::vector<CsrSeries> run_noise_level_grid(ExperimentContext& ctx) {
  const auto kind = ctx.config.str("noise.kind");
  std::vector<std::string> variants, labels;
  for (double f : ctx.config.nums("noise.fractions")) {
    variants.push_back(kind + "@" + io::fmt(f));
    labels.push_back(io::fmt(f));
  }
  if (variants.empty()) throw ArgumentError("noise.fractions must be nonempty");
  return detail::run_csr_series(ctx, variants, "noise_fraction", labels, "noise_level_grid");
}

// ---------------------------------------------------------------------------
// reg_sweep

struct RegCell {
  RegularizerSpec spec;
  std::optional<double> randy_final_train_acc;
  std::optional<double> real_best_val_acc;
  std::string error;
};

inline std::vector<RegCell> run_reg_sweep(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  std::vector<RegCell> cells{{RegularizerSpec::none(), {}, {}, {}}};
  for (const auto& k : c.list("reg.kinds")) {
    const RegKind kind = parse_reg_kind(k);
    if (kind == RegKind::none) continue;
    const auto grid = c.nums("reg." + k);
    if (grid.empty()) throw ArgumentError("reg." + k + " grid must be nonempty");
    for (double v : grid) {
      RegularizerSpec s{kind, v, kind == RegKind::adversarial ? c.num("reg.adversarial_dropout") : 0.0};
      s.validate();
      cells.push_back({s, {}, {}, {}});
    }
  }
  TrainConfig tc = train_config_from(c);
  tc.adversarial_search = lass_config_from(c);
  tc.adversarial_search.seed = derive_seed(ctx.seed(), "reg_sweep/lass");
  const Dataset base = base_training_set(ctx, c.count("data.subset"));
  const Dataset randy = make_variant(base, "randY", ctx.seed());
  const Dataset val = validation_set(ctx);

  // Two trainings per cell: index 2i on randY, 2i+1 on real data.
  auto outcomes = run_cells<double>(2 * cells.size(), ctx.workers(), [&](std::size_t j) {
    TrainConfig t = tc;
    t.regularizer = cells[j / 2].spec;
    if (j % 2 == 0) {
      t.seed = derive_seed(ctx.seed(), "reg_sweep/randY");
      return train(randy, nullptr, t).per_epoch.back().train_accuracy;
    }
    t.seed = derive_seed(ctx.seed(), "reg_sweep/real");
    return best_val_accuracy(train(base, &val, t));
  });
  io::CsvWriter csv({"regularizer", "param", "randY_final_train_acc", "real_best_val_acc"});
  auto cell = [](const std::optional<double>& v) { return v ? io::fmt(*v) : std::string("NA"); };
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].randy_final_train_acc = outcomes[2 * i].value;
    cells[i].real_best_val_acc = outcomes[2 * i + 1].value;
    cells[i].error = outcomes[2 * i].error.empty() ? outcomes[2 * i + 1].error : outcomes[2 * i].error;
    csv.row(std::string(to_string(cells[i].spec.kind)), cells[i].spec.value, cell(cells[i].randy_final_train_acc),
            cell(cells[i].real_best_val_acc));
  }
  ctx.save("reg_sweep.csv", csv);
  return cells;
}

// ---------------------------------------------------------------------------
// dump_filters

/// Binary PGM with a single-line "P5 W H 255" header.
inline std::string pgm(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw DimensionError("pgm: pixel count does not match size");
  std::string s = "P5 " + std::to_string(width) + " " + std::to_string(height) + " 255\n";
  s.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return s;
}

/// Min-max normalized to 0..255; a constant row maps to 128.
inline std::vector<std::uint8_t> normalize_gray(std::span<const double> w) {
  const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
  std::vector<std::uint8_t> out(w.size(), 128);
  if (w.empty() || *hi == *lo) return out;
  for (std::size_t i = 0; i < w.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (w[i] - *lo) / (*hi - *lo)));
  return out;
}

/// One PGM per first-layer unit (filter_000.pgm, ...) plus sheet.pgm tiling
/// them with one-pixel black gutters. Returns the written paths.
inline std::vector<std::filesystem::path> dump_filters(const MLPParams& params, const Shape& image_shape,
                                                       const std::filesystem::path& out_dir) {
  if (params.tensors.empty()) throw ArgumentError("dump_filters: no first layer");
  const Tensor& w = params.weight(0);
  const std::size_t units = w.dim(0), d = w.dim(1);
  std::size_t height = 1, width = d;
  if (image_shape.size() == 2 && image_shape[0] * image_shape[1] == d) height = image_shape[0], width = image_shape[1];
  std::vector<std::filesystem::path> files;
  const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(units))));
  const std::size_t rows = (units + cols - 1) / cols;
  const std::size_t sw = cols * (width + 1) - 1, sh = rows * (height + 1) - 1;
  std::vector<std::uint8_t> sheet(sw * sh, 0);
  for (std::size_t u = 0; u < units; ++u) {
    const auto px = normalize_gray(w.row(u));
    char name[32];
    std::snprintf(name, sizeof name, "filter_%03zu.pgm", u);
    files.push_back(out_dir / name);
    io::write_file(files.back(), pgm(width, height, px));
    const std::size_t ox = (u % cols) * (width + 1), oy = (u / cols) * (height + 1);
    for (std::size_t r = 0; r < height; ++r)
      std::copy_n(px.begin() + static_cast<std::ptrdiff_t>(r * width), width, sheet.begin() + static_cast<std::ptrdiff_t>((oy + r) * sw + ox));
  }
  files.push_back(out_dir / "sheet.pgm");
  io::write_file(files.back(), pgm(sw, sh, sheet));
  return files;
}

inline std::vector<std::filesystem::path> run_dump_filters(ExperimentContext& ctx) {
  const auto& c = ctx.config;
  std::vector<std::filesystem::path> files;
  auto record = [&](const std::vector<std::filesystem::path>& fs) {
    for (const auto& f : fs) {
      auto rel = std::filesystem::relative(f, ctx.out);
      ctx.written.push_back(rel);
      files.push_back(rel);
    }
  };
  if (const auto path = c.str("filters.params"); !path.empty()) {
    const MLPParams p = load_params(path);
    const std::size_t d = p.input_dim();
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
    record(dump_filters(p, side * side == d ? Shape{side, side} : Shape{d}, ctx.out / "filters"));
    return files;
  }
  TrainConfig tc = train_config_from(c);
  tc.seed = derive_seed(ctx.seed(), "filters/train");
  const Dataset base = base_training_set(ctx, c.count("data.subset"));
  for (const auto& v : c.list("filters.variants")) {
    const Dataset d = make_variant(base, v, ctx.seed());
    const TrainTrace t = train(d, nullptr, tc);
    record(dump_filters(t.final().params, d.input_shape, ctx.out / ("filters_" + v)));
  }
  return files;
}

// ---------------------------------------------------------------------------

/// Runs one experiment and writes manifest.json next to its artifacts.
inline void run_experiment(ExperimentKind kind, ExperimentContext& ctx) {
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::create_directories(ctx.out);
  switch (kind) {
    case ExperimentKind::easy_hard: run_easy_hard(ctx); break;
    case ExperimentKind::gini_curve: run_gini_curve(ctx); break;
    case ExperimentKind::class_matrix: run_class_matrix(ctx); break;
    case ExperimentKind::capacity_sweep: run_capacity_sweep(ctx); break;
    case ExperimentKind::ttc_sweep: run_ttc_sweep(ctx); break;
    case ExperimentKind::csr_curve: run_csr_curve(ctx); break;
    case ExperimentKind::noise_level_grid: run_noise_level_grid(ctx); break;
    case ExperimentKind::reg_sweep: run_reg_sweep(ctx); break;
    case ExperimentKind::dump_filters: run_dump_filters(ctx); break;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_manifest(ctx, kind, secs);
}

}  // namespace memo
