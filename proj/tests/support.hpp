#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "funcreg/model.hpp"
#include "funcreg/rng.hpp"
#include "funcreg/tensor.hpp"

namespace funcreg::test {

inline std::vector<double> uniform_values(std::size_t n, Rng& rng, double lo = -2.0,
                                          double hi = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) {
    x = rng.uniform(lo, hi);
  }
  return v;
}

inline Tensor random_param(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  const std::size_t n = shape_size(shape);
  return Tensor::parameter(std::move(shape), uniform_values(n, rng, lo, hi));
}

inline Tensor random_data(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  const std::size_t n = shape_size(shape);
  return Tensor::from_data(std::move(shape), uniform_values(n, rng, lo, hi));
}

struct GradCheck {
  double max_error = 0.0;  // worst violation ratio; <= 1 passes
  std::size_t checked = 0;
};

/// Backward gradients of `loss_fn` against central differences with step h.
/// An entry passes when |a - n| <= abs_floor or |a - n| <= rel * max(|a|, |n|).
/// max_error reports the worst |a - n| / (rel * max(|a|, |n|, abs_floor / rel)).
inline GradCheck check_gradients(const std::function<Tensor()>& loss_fn,
                                 std::vector<Tensor> params, double h = 1e-5,
                                 double rel = 1e-4, double abs_floor = 1e-7) {
  for (auto& p : params) {
    p.clear_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    GradientTape tape;
    GradientTape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (auto& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.size(), 0.0);
      }
    }
  }
  GradCheck out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t][i];
      const double diff = std::abs(a - numeric);
      const double scale_ref = std::max({std::abs(a), std::abs(numeric), abs_floor / rel});
      out.max_error = std::max(out.max_error, diff / (rel * scale_ref));
      ++out.checked;
    }
    params[t].clear_grad();
  }
  return out;
}

/// Smallest |pre-activation| over every ReLU unit of the encoder on x. A
/// central difference is only valid when this exceeds the probe's reach.
inline double relu_margin(const EncoderParams& encoder, const Tensor& x) {
  std::vector<double> h(x.data().begin(), x.data().end());
  const std::size_t rows = x.dim(0);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < encoder.layers.size(); ++l) {
    const auto& w = encoder.layers[l].weight;
    const auto& b = encoder.layers[l].bias;
    const std::size_t d_in = w.dim(0);
    const std::size_t d_out = w.dim(1);
    std::vector<double> z(rows * d_out);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < d_out; ++j) {
        double s = b.data()[j];
        for (std::size_t k = 0; k < d_in; ++k) {
          s += h[i * d_in + k] * w.at(k, j);
        }
        z[i * d_out + j] = s;
      }
    }
    if (l + 1 < encoder.layers.size()) {
      for (double& v : z) {
        margin = std::min(margin, std::abs(v));
        v = std::max(v, 0.0);
      }
    }
    h = std::move(z);
  }
  return margin;
}

inline ModelArch tiny_arch(std::size_t num_classes = 3) {
  ModelArch a;
  a.input_dim = 4;
  a.hidden = {5};
  a.embed_dim = 3;
  a.num_classes = num_classes;
  return a;
}

/// Adds uniform noise in [-spread, spread] to every live tensor.
inline void jitter(ModelParams& params, Rng& rng, double spread) {
  for (auto& nt : params.named_tensors()) {
    for (double& v : nt.tensor.mutable_data()) {
      v += rng.uniform(-spread, spread);
    }
  }
}

inline bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
           return std::memcmp(&x, &y, sizeof(double)) == 0;
         });
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("funcreg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace funcreg::test
