#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "memo/data.hpp"
#include "memo/errors.hpp"
#include "memo/io.hpp"
#include "memo/lass.hpp"
#include "memo/train.hpp"

namespace memo {

struct CsrReport {
  double csr = 0.0;
  std::vector<CriticalSampleResult> per_sample;
  std::size_t dataset_size = 0;
  std::optional<std::size_t> epoch_tag;

  std::size_t found_count() const {
    std::size_t n = 0;
    for (const auto& r : per_sample) n += r.found;
    return n;
  }
  std::size_t error_count() const {
    std::size_t n = 0;
    for (const auto& r : per_sample) n += !r.error.empty();
    return n;
  }
};

/// Fraction of examples with a critical sample. Example i searches with seed
/// derive_seed(cfg.seed, "lass", index_i), so the outcome for one example does
/// not depend on which other examples are in the set. Searches run in
/// row-independent chunks of `chunk` examples.
inline CsrReport csr(const Classifier& model, const Dataset& d, const LassConfig& cfg, std::size_t chunk = 250) {
  if (d.size() == 0) throw ArgumentError("csr: empty dataset");
  cfg.validate();
  if (chunk == 0) chunk = d.size();
  CsrReport rep;
  rep.dataset_size = d.size();
  rep.per_sample.reserve(d.size());
  const std::size_t n = d.input_dim();
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    const std::size_t end = std::min(d.size(), start + chunk);
    Tensor batch(Shape{end - start, n});
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = start; i < end; ++i) {
      std::copy(d.examples[i].input.begin(), d.examples[i].input.end(), batch.row(i - start).begin());
      seeds.push_back(derive_seed(cfg.seed, "lass", d.examples[i].index));
    }
    auto res = lass_search_batch(model, batch, cfg, seeds);
    for (std::size_t i = start; i < end; ++i) {
      res[i - start].example_index = d.examples[i].index;
      rep.per_sample.push_back(std::move(res[i - start]));
    }
  }
  rep.csr = static_cast<double>(rep.found_count()) / static_cast<double>(rep.dataset_size);
  return rep;
}

inline CsrReport csr(const MLPParams& params, const Dataset& d, const LassConfig& cfg) {
  return csr(mlp_classifier(params), d, cfg);
}

/// CSR of `d` under the parameters snapshotted at epochs k, 2k, ... up to the
/// last trained epoch.
inline std::vector<std::pair<std::size_t, CsrReport>> csr_over_training(const TrainTrace& trace, const Dataset& d,
                                                                        const LassConfig& cfg, std::size_t every_k_epochs) {
  if (every_k_epochs < 1) throw ArgumentError("csr_over_training: cadence must be >= 1");
  std::vector<std::pair<std::size_t, CsrReport>> out;
  for (std::size_t e = every_k_epochs; e <= trace.epochs_run(); e += every_k_epochs) {
    const Snapshot* s = trace.at_epoch(e);
    if (s == nullptr) throw GapError("csr_over_training: no snapshot for epoch " + std::to_string(e));
    CsrReport r = csr(s->params, d, cfg);
    r.epoch_tag = e;
    out.emplace_back(e, std::move(r));
  }
  return out;
}

/// Columns: example_index,found,iterations,linf_distance,original_class,flipped_class
/// (flipped_class empty when nothing was found).
inline io::CsvWriter csr_csv(const CsrReport& r) {
  io::CsvWriter csv({"example_index", "found", "iterations", "linf_distance", "original_class", "flipped_class"});
  for (const auto& s : r.per_sample)
    csv.row(s.example_index, s.found, s.iterations_used, s.linf_distance, s.original_prediction,
            s.flipped_prediction ? std::to_string(*s.flipped_prediction) : std::string());
  return csv;
}

inline nlohmann::json csr_summary(const CsrReport& r, const LassConfig& cfg) {
  nlohmann::json j{{"csr", r.csr},
                   {"dataset_size", r.dataset_size},
                   {"found", r.found_count()},
                   {"errors", r.error_count()},
                   {"config", cfg}};
  j["epoch"] = r.epoch_tag ? nlohmann::json(*r.epoch_tag) : nlohmann::json(nullptr);
  return j;
}

}  // namespace memo
