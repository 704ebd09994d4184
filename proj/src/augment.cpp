#include "funcreg/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "funcreg/error.hpp"
#include "funcreg/rng.hpp"

namespace funcreg {

namespace {

constexpr std::array<std::pair<AugmentKind, std::string_view>, 7> kKindNames{{
    {AugmentKind::gaussian_noise, "gaussian_noise"},
    {AugmentKind::rotate, "rotate"},
    {AugmentKind::translate, "translate"},
    {AugmentKind::cutout, "cutout"},
    {AugmentKind::intensity_scale, "intensity_scale"},
    {AugmentKind::contrast, "contrast"},
    {AugmentKind::horizontal_flip, "horizontal_flip"},
}};

double bilinear(std::span<const double> grid, std::size_t side, double row, double col) {
  const double r0 = std::floor(row);
  const double c0 = std::floor(col);
  const double fr = row - r0;
  const double fc = col - c0;
  double value = 0.0;
  for (int dr = 0; dr < 2; ++dr) {
    for (int dc = 0; dc < 2; ++dc) {
      const double r = r0 + dr;
      const double c = c0 + dc;
      if (r < 0.0 || c < 0.0 || r >= static_cast<double>(side) || c >= static_cast<double>(side)) {
        continue;
      }
      const double w = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
      value += w * grid[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)];
    }
  }
  return value;
}

}  // namespace

std::size_t grid_side(std::size_t n_values) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_values))));
  if (side * side != n_values || side == 0) {
    throw ShapeError("grid op needs a square number of features, got " + std::to_string(n_values));
  }
  return side;
}

std::vector<double> rotate_grid(std::span<const double> grid, double degrees) {
  const std::size_t side = grid_side(grid.size());
  const double centre = (static_cast<double>(side) - 1.0) / 2.0;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  std::vector<double> out(grid.size());
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t col = 0; col < side; ++col) {
      // Inverse map of the output pixel. With y = centre - row pointing up,
      // a counter-clockwise rotation by theta is undone by rotating by -theta.
      const double x = static_cast<double>(col) - centre;
      const double y = centre - static_cast<double>(r);
      const double sx = c * x + s * y;
      const double sy = -s * x + c * y;
      out[r * side + col] = bilinear(grid, side, centre - sy, sx + centre);
    }
  }
  return out;
}

std::vector<double> translate_grid(std::span<const double> grid, double dx, double dy) {
  const std::size_t side = grid_side(grid.size());
  std::vector<double> out(grid.size());
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] =
          bilinear(grid, side, static_cast<double>(r) - dy, static_cast<double>(c) - dx);
    }
  }
  return out;
}

std::vector<double> flip_grid_horizontal(std::span<const double> grid) {
  const std::size_t side = grid_side(grid.size());
  std::vector<double> out(grid.size());
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] = grid[r * side + (side - 1 - c)];
    }
  }
  return out;
}

void clamp_features(std::span<double> values) {
  for (double& v : values) {
    v = std::clamp(v, kFeatureMin, kFeatureMax);
  }
}

std::string_view to_string(AugmentKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) {
      return name;
    }
  }
  return "unknown";
}

AugmentKind augment_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) {
      return k;
    }
  }
  throw ConfigError("unknown augmentation op '" + std::string(name) + "'");
}

std::vector<AugmentKind> AugmentPolicy::default_pool() {
  // horizontal_flip is opt-in: several class templates are mirror images of
  // each other.
  return {AugmentKind::gaussian_noise, AugmentKind::rotate,          AugmentKind::translate,
          AugmentKind::cutout,         AugmentKind::intensity_scale, AugmentKind::contrast};
}

void AugmentPolicy::validate() const {
  if (!(magnitude >= 0.0 && magnitude <= 1.0)) {
    throw ConfigError("augment magnitude must lie in [0, 1]");
  }
  if (n_ops > ops.size()) {
    throw ConfigError("augment n_ops exceeds the op pool size");
  }
  auto sorted = ops;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("augment op pool lists an op twice");
  }
}

std::uint64_t augment_stream_seed(const AugmentPolicy& policy, std::uint64_t step_seed,
                                  std::size_t sample, std::size_t slot) {
  return derive_seed({policy.seed, step_seed, sample, slot});
}

std::vector<double> apply_op(const AugmentOp& op, std::span<const double> sample,
                             std::uint64_t stream_seed) {
  Rng rng(stream_seed);
  const double m = op.magnitude;
  std::vector<double> out(sample.begin(), sample.end());
  switch (op.kind) {
    case AugmentKind::gaussian_noise: {
      const double sigma = 0.5 * m;
      for (double& v : out) {
        v += sigma * rng.normal();
      }
      break;
    }
    case AugmentKind::rotate: {
      const double sign = rng.coin() ? 1.0 : -1.0;
      out = rotate_grid(sample, sign * 45.0 * m);
      break;
    }
    case AugmentKind::translate: {
      const double sign = rng.coin() ? 1.0 : -1.0;
      const bool horizontal = rng.coin();
      const double shift = sign * 2.0 * m;
      out = horizontal ? translate_grid(sample, shift, 0.0) : translate_grid(sample, 0.0, shift);
      break;
    }
    case AugmentKind::cutout: {
      const std::size_t side = grid_side(sample.size());
      const auto hole = static_cast<std::size_t>(std::floor(4.0 * m));
      if (hole == 0 || hole > side) {
        break;
      }
      const std::size_t r0 = rng.index(side - hole + 1);
      const std::size_t c0 = rng.index(side - hole + 1);
      for (std::size_t r = r0; r < r0 + hole; ++r) {
        for (std::size_t c = c0; c < c0 + hole; ++c) {
          out[r * side + c] = 0.0;
        }
      }
      break;
    }
    case AugmentKind::intensity_scale: {
      const double factor = rng.uniform(1.0 - 0.5 * m, 1.0 + 0.5 * m);
      for (double& v : out) {
        v *= factor;
      }
      break;
    }
    case AugmentKind::contrast: {
      const double gamma = rng.uniform(1.0 - 0.5 * m, 1.0 + 0.5 * m);
      const double mu = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(out.size());
      for (double& v : out) {
        v = mu + gamma * (v - mu);
      }
      break;
    }
    case AugmentKind::horizontal_flip: {
      if (rng.uniform() < m) {
        out = flip_grid_horizontal(sample);
      }
      break;
    }
  }
  clamp_features(out);
  return out;
}

std::vector<AugmentKind> draw_ops(const AugmentPolicy& policy, std::uint64_t step_seed,
                                  std::size_t sample) {
  Rng rng(augment_stream_seed(policy, step_seed, sample, 0));
  std::vector<AugmentKind> pool = policy.ops;
  // Partial Fisher-Yates: the first n_ops entries are a uniform draw without
  // replacement.
  for (std::size_t i = 0; i < policy.n_ops; ++i) {
    const std::size_t j = i + rng.index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(policy.n_ops);
  return pool;
}

Tensor apply_policy(const AugmentPolicy& policy, const Tensor& x, std::uint64_t step_seed) {
  policy.validate();
  if (x.rank() != 2) {
    throw ShapeError("apply_policy expects a [B x d] batch");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t width = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(xd.begin(), xd.end());
  for (std::size_t i = 0; i < batch; ++i) {
    const auto kinds = draw_ops(policy, step_seed, i);
    std::vector<double> row(xd.begin() + static_cast<std::ptrdiff_t>(i * width),
                            xd.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    for (std::size_t j = 0; j < kinds.size(); ++j) {
      row = apply_op({kinds[j], policy.magnitude}, row,
                     augment_stream_seed(policy, step_seed, i, j + 1));
    }
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace funcreg
