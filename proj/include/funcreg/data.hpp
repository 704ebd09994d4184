#pragma once

// Synthetic covariate-shift benchmark. Every example is a class template
// pushed through a domain transform and per-example noise; domains change
// P(x) only, never the label attached to a template.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "funcreg/tensor.hpp"
#include "json.hpp"

namespace funcreg {

struct Dataset {
  std::string name;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // row-major [size() x dim]
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::span<const double> row(std::size_t i) const;
  /// Whole split as a [n x dim] tensor.
  Tensor features_tensor() const;
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

struct DomainSpec {
  std::string domain_id;
  double rotation_deg = 0.0;
  double noise_sigma = 0.0;
  double intensity_shift = 0.0;
  /// 0 disables the background texture.
  std::uint64_t background_texture_seed = 0;
  double texture_amplitude = 0.5;

  bool operator==(const DomainSpec&) const = default;
};

struct SplitSizes {
  std::size_t pretrain_per_domain = 600;
  std::size_t id_train = 400;
  std::size_t test = 400;
  std::size_t min_per_class = 5;
};

struct ShiftBenchmark {
  std::size_t num_classes = 10;
  /// Classes of the fine-tuning task, by global id. Empty means all.
  std::vector<int> finetune_classes;
  std::vector<std::vector<double>> templates;  // K grids, 8x8 each
  std::vector<DomainSpec> pretrain_domains;
  DomainSpec id_domain;
  std::vector<DomainSpec> ood_domains;
  /// Domain used for the held-out-class split (defaults to the first
  /// pretraining domain).
  std::optional<DomainSpec> heldout_domain;
  SplitSizes sizes;
  std::uint64_t seed = 0;

  std::vector<int> task_classes() const;
  std::vector<int> heldout_classes() const;
  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// Built-in 8x8 class patterns (bars, crosses, blobs, rings...). At most
/// kMaxTemplates classes.
std::vector<std::vector<double>> canonical_templates(std::size_t num_classes);
inline constexpr std::size_t kMaxTemplates = 12;
inline constexpr std::size_t kGridValues = 64;

/// The benchmark used by the CLI defaults and the acceptance suite.
ShiftBenchmark default_benchmark();

struct BenchmarkSplits {
  Dataset pretrain;
  Dataset pretrain_test;
  Dataset id_train;
  Dataset id_test;
  std::vector<Dataset> ood_tests;
  /// Present when the task uses a strict subset of the classes. Labels index
  /// into ShiftBenchmark::heldout_classes().
  std::optional<Dataset> heldout;
};

/// Domain transform of one template, before per-example noise.
std::vector<double> render_domain(std::span<const double> grid, const DomainSpec& domain);

/// Deterministic in spec.seed. Task splits use labels 0..|task_classes|-1.
BenchmarkSplits generate_benchmark(const ShiftBenchmark& spec);

nlohmann::json to_json(const ShiftBenchmark& spec);
/// Strict: unknown keys raise ConfigError naming the key.
ShiftBenchmark benchmark_from_json(const nlohmann::json& j);

/// CSV with header `label,x0,...,x{d-1}`; floats in shortest round-trip form.
void save_csv(const Dataset& data, const std::filesystem::path& path);
/// Throws ParseError with the 1-based line number, RangeError for labels
/// outside [0, num_classes).
Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes);

/// Directory layout: `benchmark.json` (the spec) plus one CSV per split:
/// pretrain, pretrain_test, id_train, id_test, one file per OOD domain id and
/// heldout when present. Returns the written paths.
std::vector<std::filesystem::path> save_benchmark_dir(const ShiftBenchmark& spec,
                                                      const BenchmarkSplits& splits,
                                                      const std::filesystem::path& dir);

struct LoadedBenchmark {
  ShiftBenchmark spec;
  BenchmarkSplits splits;
};

/// Throws ParseError when a file is missing or malformed.
LoadedBenchmark load_benchmark_dir(const std::filesystem::path& dir);

struct Batch {
  Tensor x;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Shuffled mini-batches for one epoch, keyed by (seed, epoch). The last
/// partial batch is kept. Throws StateError for an empty dataset.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch);

}  // namespace funcreg
