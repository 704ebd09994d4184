#pragma once

// RandAugment-style label-preserving perturbations over square intensity
// grids. Used to synthesise the simulated-OOD inputs x~ for the functional
// regularizers, and (grid ops only) by the benchmark generator.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "funcreg/tensor.hpp"

namespace funcreg {

inline constexpr double kFeatureMin = -3.0;
inline constexpr double kFeatureMax = 3.0;

/// Side length of a flattened square grid; throws ShapeError otherwise.
std::size_t grid_side(std::size_t n_values);

/// Bilinear rotation about the grid centre with zero padding. Positive
/// angles rotate counter-clockwise in (column right, row up) coordinates.
std::vector<double> rotate_grid(std::span<const double> grid, double degrees);
/// Bilinear shift by (dx columns, dy rows) with zero fill.
std::vector<double> translate_grid(std::span<const double> grid, double dx, double dy);
std::vector<double> flip_grid_horizontal(std::span<const double> grid);
void clamp_features(std::span<double> values);

enum class AugmentKind {
  gaussian_noise,
  rotate,
  translate,
  cutout,
  intensity_scale,
  contrast,
  horizontal_flip,
};

std::string_view to_string(AugmentKind kind);
/// Throws ConfigError for unknown names.
AugmentKind augment_kind_from_string(std::string_view name);

struct AugmentOp {
  AugmentKind kind;
  double magnitude;  // [0, 1]
};

/// Magnitude m maps to: noise sigma 0.5m, rotation +-45m degrees,
/// translation 2m pixels, cutout side floor(4m), intensity factor and
/// contrast gamma uniform in [1 - 0.5m, 1 + 0.5m], horizontal flip with
/// probability m. Every op is the identity at m = 0.
struct AugmentPolicy {
  std::size_t n_ops = 2;
  double magnitude = 0.5;
  std::vector<AugmentKind> ops = default_pool();
  std::uint64_t seed = 0;

  static std::vector<AugmentKind> default_pool();
  void validate() const;
};

/// Seed of the RNG stream consumed by one sample. Slot 0 picks the ops;
/// slot j >= 1 drives the j-th applied op.
std::uint64_t augment_stream_seed(const AugmentPolicy& policy, std::uint64_t step_seed,
                                  std::size_t sample, std::size_t slot);

/// Applies one op to one sample, drawing randomness from a stream seeded with
/// `stream_seed`. Output is clamped to the feature range.
std::vector<double> apply_op(const AugmentOp& op, std::span<const double> sample,
                             std::uint64_t stream_seed);

/// The ops drawn for one sample: n_ops distinct kinds from the pool.
std::vector<AugmentKind> draw_ops(const AugmentPolicy& policy, std::uint64_t step_seed,
                                  std::size_t sample);

/// Augments every row of x [B x d] independently. Pure in (policy, x,
/// step_seed). The result never carries tape linkage.
Tensor apply_policy(const AugmentPolicy& policy, const Tensor& x, std::uint64_t step_seed);

}  // namespace funcreg
