#pragma once

// Encoder + prototype-head classifier. Logits are inner products between
// encoder features and a table of class prototypes, the same structure as
// zero-shot prediction with frozen text embeddings.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "funcreg/tensor.hpp"

namespace funcreg {

struct DenseLayer {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]
};

/// MLP with relu between layers and a linear final layer.
struct EncoderParams {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  /// Throws ShapeError when the layer chain is inconsistent or empty.
  void validate() const;
};

struct PrototypeHead {
  Tensor prototypes;  // [K x D]
  bool trainable = true;

  std::size_t num_classes() const { return prototypes.dim(0); }
  std::size_t dim() const { return prototypes.dim(1); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  EncoderParams encoder;
  PrototypeHead head;

  /// Independent copy. `requires_grad` applies to every tensor except the
  /// head, which keeps requires_grad == head.trainable when true is passed.
  ModelParams deep_copy(bool requires_grad) const;
  /// Encoder layers in order ("encoder.<i>.weight", "encoder.<i>.bias"),
  /// then "head.prototypes".
  std::vector<NamedTensor> named_tensors() const;
  std::size_t parameter_count() const;
};

struct ModelArch {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t embed_dim = 16;
  std::size_t num_classes = 10;
};

/// He-normal hidden weights, zero biases, Gaussian prototype rows.
ModelParams init_params(const ModelArch& arch, std::uint64_t seed);

Tensor forward_encoder(const EncoderParams& encoder, const Tensor& x);
Tensor forward_features(const ModelParams& params, const Tensor& x);
Tensor forward_logits(const ModelParams& params, const Tensor& x);
/// Head applied to precomputed features.
Tensor head_logits(const PrototypeHead& head, const Tensor& features);

/// Live parameters plus the optional frozen snapshot and EMA shadow used by
/// the regularizers.
class ModelState {
 public:
  explicit ModelState(ModelParams live);

  ModelParams& live() noexcept { return live_; }
  const ModelParams& live() const noexcept { return live_; }

  bool has_snapshot() const noexcept { return snapshot_.has_value(); }
  /// Throws StateError when no snapshot was taken.
  const ModelParams& snapshot() const;
  /// Deep-copies the live parameters. A second call replaces the first
  /// snapshot.
  void take_snapshot();

  bool has_ema() const noexcept { return ema_.has_value(); }
  const ModelParams& ema() const;
  /// Shadow <- copy of live parameters.
  void init_ema();
  /// shadow <- rho * shadow + (1 - rho) * live. Throws StateError when the
  /// shadow was never initialised.
  void ema_update(double rho);

 private:
  ModelParams live_;
  std::optional<ModelParams> snapshot_;
  std::optional<ModelParams> ema_;
};

Tensor forward_features(const ModelState& m, const Tensor& x);
Tensor forward_logits(const ModelState& m, const Tensor& x);

/// Elementwise (1 - alpha) * theta0 + alpha * theta_ft.
ModelParams interpolate_weights(const ModelParams& theta0, const ModelParams& theta_ft,
                                double alpha);

std::vector<double> flatten(const ModelParams& params);
/// Inverse of flatten(); sizes must match exactly.
void assign_flat(ModelParams& params, std::span<const double> values);
double parameter_distance(const ModelParams& a, const ModelParams& b);
void require_same_shapes(const ModelParams& a, const ModelParams& b);

// Checkpoints: `<stem>.json` manifest and `<stem>.bin` payload of
// little-endian float64 values.

struct CheckpointMeta {
  /// Global class ids of the head rows, in row order. Empty means 0..K-1.
  std::vector<int> classes;
};

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
};

/// `path` may be the stem or either of the two file names.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const CheckpointMeta& meta = {});
/// Throws ParseError (with byte offset) on malformed or truncated files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& path);
std::filesystem::path checkpoint_payload_path(const std::filesystem::path& path);

}  // namespace funcreg
