#pragma once

// Datasets with per-example provenance: MNIST IDX loading, 2x2 downscaling,
// input/label noise injection, unique-class relabeling and stratified subsets.
// Every transform is a pure function returning a new Dataset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "memo/errors.hpp"
#include "memo/io.hpp"
#include "memo/rng.hpp"
#include "memo/tensor.hpp"

namespace memo {

enum class NoiseKind : std::uint8_t { none = 0, rand_x = 1, rand_y = 2 };

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::rand_x: return "randX";
    case NoiseKind::rand_y: return "randY";
  }
  return "?";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "none" || s == "real") return NoiseKind::none;
  if (s == "randX" || s == "randx" || s == "rand_x") return NoiseKind::rand_x;
  if (s == "randY" || s == "randy" || s == "rand_y") return NoiseKind::rand_y;
  throw ArgumentError("unknown noise kind '" + s + "'");
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::none;
  double fraction = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const NoiseSpec&) const = default;
};

struct ExampleRecord {
  std::uint64_t index = 0;
  std::vector<double> input;  ///< pixels, row-major over Dataset::input_shape
  std::uint32_t true_label = 0;
  std::uint32_t effective_label = 0;
  bool input_noised = false;
  bool label_noised = false;
  std::vector<double> original_input;  ///< pre-noise pixels; empty unless input_noised

  bool operator==(const ExampleRecord&) const = default;
};

struct SourceStats {
  double mean = 0.0;
  double variance = 0.0;
  bool operator==(const SourceStats&) const = default;
};

struct Dataset {
  std::vector<ExampleRecord> examples;
  Shape input_shape;
  std::uint32_t num_classes = 10;
  NoiseSpec noise_spec;  ///< most recent noise transform applied
  SourceStats source_stats;

  std::size_t size() const { return examples.size(); }
  std::size_t input_dim() const { return shape_size(input_shape); }

  /// Inputs stacked as an [N x D] matrix.
  Tensor input_matrix() const {
    const std::size_t d = input_dim();
    Tensor m(Shape{examples.size(), d});
    for (std::size_t i = 0; i < examples.size(); ++i)
      std::copy(examples[i].input.begin(), examples[i].input.end(), m.row(i).begin());
    return m;
  }

  std::vector<std::uint32_t> labels() const {
    std::vector<std::uint32_t> y(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) y[i] = examples[i].effective_label;
    return y;
  }

  std::size_t count_input_noised() const {
    return static_cast<std::size_t>(std::count_if(examples.begin(), examples.end(), [](auto& e) { return e.input_noised; }));
  }
  std::size_t count_label_noised() const {
    return static_cast<std::size_t>(std::count_if(examples.begin(), examples.end(), [](auto& e) { return e.label_noised; }));
  }

  bool operator==(const Dataset&) const = default;
};

namespace detail {

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline SourceStats compute_stats(const std::vector<ExampleRecord>& ex) {
  double sum = 0.0, n = 0.0;
  for (const auto& e : ex) {
    const auto& px = e.input_noised ? e.original_input : e.input;
    for (double v : px) sum += v;
    n += static_cast<double>(px.size());
  }
  if (n == 0.0) return {};
  const double mean = sum / n;
  double ss = 0.0;
  for (const auto& e : ex) {
    const auto& px = e.input_noised ? e.original_input : e.input;
    for (double v : px) ss += (v - mean) * (v - mean);
  }
  return {mean, ss / n};
}

inline std::vector<std::uint32_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> p(n);
  std::iota(p.begin(), p.end(), 0u);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

/// floor(fraction * n), tolerant of representation error in fraction.
inline std::size_t noise_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

inline void check_fraction(double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ArgumentError("noise fraction must be in [0, 1]");
}

}  // namespace detail

/// Parse an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled to [0, 1]; labels must be < 10.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = io::read_file(images_path);
  const auto lab = io::read_file(labels_path);
  if (img.size() < 16) throw IoError(images_path.string() + ": truncated header");
  if (lab.size() < 8) throw IoError(labels_path.string() + ": truncated header");
  if (detail::be32(img, 0) != 0x00000803)
    throw FormatError(images_path.string() + ": bad magic number (expected 0x00000803)");
  if (detail::be32(lab, 0) != 0x00000801)
    throw FormatError(labels_path.string() + ": bad magic number (expected 0x00000801)");
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t n_labels = detail::be32(lab, 4);
  if (n != n_labels)
    throw ConsistencyError("image count " + std::to_string(n) + " does not match label count " + std::to_string(n_labels));
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d) throw IoError(images_path.string() + ": truncated payload");
  if (lab.size() < 8 + n) throw IoError(labels_path.string() + ": truncated payload");

  Dataset ds;
  ds.input_shape = {rows, cols};
  ds.num_classes = 10;
  ds.examples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = ds.examples[i];
    e.index = i;
    e.input.resize(d);
    for (std::size_t p = 0; p < d; ++p) e.input[p] = static_cast<double>(img[16 + i * d + p]) / 255.0;
    const unsigned label = lab[8 + i];
    if (label >= 10) throw ConsistencyError("label " + std::to_string(label) + " at record " + std::to_string(i) + " is not < 10");
    e.true_label = e.effective_label = label;
  }
  ds.source_stats = detail::compute_stats(ds.examples);
  return ds;
}

struct MnistSplits {
  Dataset train;
  std::optional<Dataset> validation;
};

/// Loads train-{images-idx3,labels-idx1}-ubyte and, when present, the t10k pair as validation.
inline MnistSplits load_mnist_dir(const std::filesystem::path& dir) {
  MnistSplits s{load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"), std::nullopt};
  if (std::filesystem::exists(dir / "t10k-images-idx3-ubyte"))
    s.validation = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  return s;
}

/// 2x2 mean pooling: [H x W] -> [H/2 x W/2].
inline Dataset downscale(const Dataset& d) {
  if (d.input_shape.size() != 2 || d.input_shape[0] % 2 != 0 || d.input_shape[1] % 2 != 0)
    throw DimensionError("downscale expects even [H x W] images, got " + shape_string(d.input_shape));
  const std::size_t h = d.input_shape[0], w = d.input_shape[1], oh = h / 2, ow = w / 2;
  auto pool = [&](const std::vector<double>& px) {
    std::vector<double> out(oh * ow);
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c)
        out[r * ow + c] = (px[(2 * r) * w + 2 * c] + px[(2 * r) * w + 2 * c + 1] + px[(2 * r + 1) * w + 2 * c] +
                           px[(2 * r + 1) * w + 2 * c + 1]) /
                          4.0;
    return out;
  };
  Dataset out = d;
  out.input_shape = {oh, ow};
  for (auto& e : out.examples) {
    e.input = pool(e.input);
    if (e.input_noised) e.original_input = pool(e.original_input);
  }
  out.source_stats = detail::compute_stats(out.examples);
  return out;
}

/// Replace the inputs of floor(fraction * N) seed-selected examples with i.i.d.
/// Gaussian pixels whose mean and variance equal the dataset's source_stats.
/// Samples are not clipped to the pixel range.
inline Dataset inject_input_noise(const Dataset& d, double fraction, std::uint64_t seed) {
  detail::check_fraction(fraction);
  Dataset out = d;
  out.noise_spec = {NoiseKind::rand_x, fraction, seed};
  const std::size_t k = detail::noise_count(fraction, d.size());
  if (k == 0) return d;
  Rng select(derive_seed(seed, "select"));
  Rng pixels(derive_seed(seed, "pixels"));
  auto perm = detail::permutation(d.size(), select);
  std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  const double sd = std::sqrt(d.source_stats.variance);
  for (std::size_t j = 0; j < k; ++j) {
    auto& e = out.examples[perm[j]];
    if (!e.input_noised) e.original_input = e.input;
    e.input_noised = true;
    for (auto& v : e.input) v = pixels.normal(d.source_stats.mean, sd);
  }
  return out;
}

/// Give floor(fraction * N) seed-selected examples a uniformly drawn label
/// (which may coincide with the true label).
inline Dataset inject_label_noise(const Dataset& d, double fraction, std::uint64_t seed) {
  detail::check_fraction(fraction);
  const std::size_t k = detail::noise_count(fraction, d.size());
  if (k == 0) return d;
  Dataset out = d;
  out.noise_spec = {NoiseKind::rand_y, fraction, seed};
  Rng select(derive_seed(seed, "select"));
  Rng labels(derive_seed(seed, "labels"));
  auto perm = detail::permutation(d.size(), select);
  std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t j = 0; j < k; ++j) {
    auto& e = out.examples[perm[j]];
    e.label_noised = true;
    e.effective_label = static_cast<std::uint32_t>(labels.below(d.num_classes));
  }
  return out;
}

inline Dataset apply_noise(const Dataset& d, const NoiseSpec& spec) {
  switch (spec.kind) {
    case NoiseKind::none: return d;
    case NoiseKind::rand_x: return inject_input_noise(d, spec.fraction, spec.seed);
    case NoiseKind::rand_y: return inject_label_noise(d, spec.fraction, spec.seed);
  }
  return d;
}

/// One class per example: effective_label(i) = i, num_classes = N.
inline Dataset unique_class_labels(const Dataset& d) {
  Dataset out = d;
  out.num_classes = static_cast<std::uint32_t>(d.size());
  for (std::size_t i = 0; i < out.examples.size(); ++i) {
    auto& e = out.examples[i];
    e.effective_label = static_cast<std::uint32_t>(i);
    e.label_noised = e.effective_label != e.true_label;
  }
  return out;
}

/// Seed-deterministic sample of n examples without replacement. When no label
/// is noised the sample is class-stratified (largest-remainder quotas).
inline Dataset subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n > d.size()) throw ArgumentError("subset of " + std::to_string(n) + " from " + std::to_string(d.size()) + " examples");
  Rng rng(derive_seed(seed, "subset"));
  std::vector<std::uint32_t> chosen;
  chosen.reserve(n);
  if (d.count_label_noised() == 0 && n < d.size()) {
    std::vector<std::vector<std::uint32_t>> by_class(d.num_classes);
    for (std::uint32_t i = 0; i < d.size(); ++i) by_class[d.examples[i].effective_label].push_back(i);
    std::vector<std::size_t> quota(d.num_classes);
    std::vector<std::pair<double, std::uint32_t>> rem;
    std::size_t assigned = 0;
    for (std::uint32_t c = 0; c < d.num_classes; ++c) {
      const double exact = static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(d.size());
      quota[c] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[c];
      rem.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[rem[i % rem.size()].second];
    for (std::uint32_t c = 0; c < d.num_classes; ++c) {
      auto& members = by_class[c];
      auto p = detail::permutation(members.size(), rng);
      for (std::size_t j = 0; j < quota[c] && j < members.size(); ++j) chosen.push_back(members[p[j]]);
    }
  } else {
    auto p = detail::permutation(d.size(), rng);
    chosen.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n));
  }
  auto order = detail::permutation(chosen.size(), rng);
  Dataset out = d;
  out.examples.clear();
  out.examples.reserve(n);
  for (auto j : order) out.examples.push_back(d.examples[chosen[j]]);
  return out;
}

// ---------------------------------------------------------------------------
// Snapshot container (little-endian):
//   "MDSB" | u32 version=1 | u64 N | u32 rank | u64 dims[rank] | u32 num_classes
//   | u8 noise kind | f64 noise fraction | u64 noise seed | f64 mean | f64 variance
//   then N records: u64 index | u32 true_label | u32 effective_label
//   | u8 input_noised | u8 label_noised | f64 input[D] | (f64 original[D] if input_noised)

inline std::string serialize(const Dataset& d) {
  io::Writer w;
  w.bytes("MDSB");
  w.u32(1);
  w.u64(d.size());
  w.u32(static_cast<std::uint32_t>(d.input_shape.size()));
  for (auto s : d.input_shape) w.u64(s);
  w.u32(d.num_classes);
  w.u8(static_cast<std::uint8_t>(d.noise_spec.kind));
  w.f64(d.noise_spec.fraction);
  w.u64(d.noise_spec.seed);
  w.f64(d.source_stats.mean);
  w.f64(d.source_stats.variance);
  for (const auto& e : d.examples) {
    w.u64(e.index);
    w.u32(e.true_label);
    w.u32(e.effective_label);
    w.u8(e.input_noised);
    w.u8(e.label_noised);
    w.doubles(e.input);
    if (e.input_noised) w.doubles(e.original_input);
  }
  return w.data();
}

inline Dataset deserialize_dataset(std::vector<unsigned char> bytes, const std::string& source = "dataset") {
  io::Reader r(std::move(bytes), source);
  if (r.bytes(4) != "MDSB") throw FormatError(source + ": not a dataset snapshot");
  if (const auto v = r.u32(); v != 1) throw FormatError(source + ": unsupported version " + std::to_string(v));
  Dataset d;
  const auto n = r.u64();
  d.input_shape.resize(r.u32());
  for (auto& s : d.input_shape) s = r.u64();
  d.num_classes = r.u32();
  d.noise_spec.kind = static_cast<NoiseKind>(r.u8());
  d.noise_spec.fraction = r.f64();
  d.noise_spec.seed = r.u64();
  d.source_stats.mean = r.f64();
  d.source_stats.variance = r.f64();
  const std::size_t dim = d.input_dim();
  d.examples.resize(n);
  for (auto& e : d.examples) {
    e.index = r.u64();
    e.true_label = r.u32();
    e.effective_label = r.u32();
    e.input_noised = r.u8() != 0;
    e.label_noised = r.u8() != 0;
    e.input.resize(dim);
    r.doubles(e.input);
    if (e.input_noised) {
      e.original_input.resize(dim);
      r.doubles(e.original_input);
    }
    if (e.effective_label >= d.num_classes) throw ConsistencyError(source + ": label out of range");
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) { io::write_file(path, serialize(d)); }
inline Dataset load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(io::read_file(path), path.string());
}

}  // namespace memo
