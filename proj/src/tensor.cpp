#include "funcreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>

#include "funcreg/error.hpp"

namespace funcreg {

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;
  bool requires_grad = false;
  const GradientTape* tape = nullptr;
  std::optional<std::size_t> tape_id;

  std::vector<double>& grad_slot() {
    if (!grad) {
      grad.emplace(data.size(), 0.0);
    }
    return *grad;
  }
};

namespace {

thread_local GradientTape* g_active_tape = nullptr;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << (i ? "x" : "") << s[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::string_view op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Row view of a trailing-axis op input: rank-1 is one row.
struct Rows {
  std::size_t count;
  std::size_t width;
};

Rows as_rows(std::string_view op, const Tensor& t) {
  if (t.rank() == 1) {
    return {1, t.dim(0)};
  }
  if (t.rank() == 2) {
    return {t.dim(0), t.dim(1)};
  }
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

// Adds `values` into the gradient of `t` when it participates in backward.
void accumulate(const Tensor& t, std::span<const double> values) {
  if (!t.requires_grad()) {
    return;
  }
  auto& g = t.impl()->grad_slot();
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] += values[i];
  }
}

// Broadcast pattern for binary elementwise ops.
std::size_t broadcast_period(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    return a.size();
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() < sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    return b.size();
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " +
                   shape_str(sb));
}

std::vector<double> reduce_broadcast(std::span<const double> g, std::size_t period) {
  std::vector<double> out(period, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    out[i % period] += g[i];
  }
  return out;
}

}  // namespace

std::size_t shape_size(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Creates an op output, checks it, and records the backward rule when any
// input needs a gradient and a tape is active.
Tensor make_result(std::string_view kind, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward_fn) {
  check_finite(kind, data);
  auto impl = std::make_shared<Tensor::Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  GradientTape* tape = g_active_tape;
  if (tape != nullptr && any_requires_grad(inputs)) {
    impl->requires_grad = true;
    impl->tape = tape;
    impl->tape_id = tape->record(kind, impl, std::move(backward_fn));
  }
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }
  if (shape_size(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  check_finite("from_data", data);
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> data(shape_size(shape), 0.0);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return from_data(std::move(shape), std::move(data), true);
}

const Shape& Tensor::shape() const {
  if (!impl_) {
    throw StateError("use of undefined tensor");
  }
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return shape_size(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank("at", *this, 2);
  if (row >= dim(0) || col >= dim(1)) {
    throw IndexError("at(" + std::to_string(row) + ", " + std::to_string(col) +
                     ") out of range for " + shape_str(shape()));
  }
  return impl_->data[row * dim(1) + col];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw StateError("tensor has no gradient");
  }
  return *impl_->grad;
}

void Tensor::clear_grad() {
  if (impl_) {
    impl_->grad.reset();
  }
}

std::optional<std::size_t> Tensor::tape_id() const {
  return impl_ ? impl_->tape_id : std::nullopt;
}

std::span<double> Tensor::mutable_data() {
  if (impl_->tape_id) {
    throw StateError("mutable_data() on a tape-recorded tensor");
  }
  return impl_->data;
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  return from_data(shape(), impl_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// GradientTape

GradientTape::~GradientTape() {
  if (g_active_tape == this) {
    g_active_tape = nullptr;
  }
}

GradientTape::Scope::Scope(GradientTape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

GradientTape::Scope::~Scope() { g_active_tape = previous_; }

GradientTape* GradientTape::active() noexcept { return g_active_tape; }

std::size_t GradientTape::record(std::string_view kind, std::shared_ptr<Tensor::Impl> output,
                                 std::function<void(std::span<const double>)> backward_fn) {
  nodes_.push_back(Node{kind, std::move(output), std::move(backward_fn)});
  return nodes_.size() - 1;
}

void GradientTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw StateError("backward() requires a scalar loss");
  }
  const auto& impl = loss.impl();
  if (impl->tape != this || !impl->tape_id) {
    throw StateError("backward() loss is not recorded on this tape");
  }
  impl->grad_slot()[0] += 1.0;
  last_visits_ = 0;
  for (std::size_t i = *impl->tape_id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.output->grad) {
      continue;
    }
    node.backward(*node.output->grad);
    ++last_visits_;
  }
}

void backward(const Tensor& loss) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) {
    throw StateError("backward() without an active tape");
  }
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] += aip * brow[j];
      }
    }
  }
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g) {
                       auto ad = a.data();
                       auto bd = b.data();
                       if (a.requires_grad()) {
                         std::vector<double> ga(m * k, 0.0);
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) {
                               acc += g[i * n + j] * bd[p * n + j];
                             }
                             ga[i * k + p] = acc;
                           }
                         }
                         accumulate(a, ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(k * n, 0.0);
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             const double aip = ad[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) {
                               gb[p * n + j] += aip * g[i * n + j];
                             }
                           }
                         }
                         accumulate(b, gb);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[j * m + i] = ad[i * n + j];
    }
  }
  return make_result("transpose", {n, m}, std::move(out), {a},
                     [a, m, n](std::span<const double> g) {
                       std::vector<double> ga(m * n);
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < n; ++j) {
                           ga[i * n + j] = g[j * m + i];
                         }
                       }
                       accumulate(a, ga);
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period("add", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] + bd[i % period];
  }
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [a, b, period](std::span<const double> g) {
                       accumulate(a, g);
                       if (b.requires_grad()) {
                         accumulate(b, reduce_broadcast(g, period));
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period("sub", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] - bd[i % period];
  }
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [a, b, period](std::span<const double> g) {
                       accumulate(a, g);
                       if (b.requires_grad()) {
                         auto gb = reduce_broadcast(g, period);
                         for (double& v : gb) {
                           v = -v;
                         }
                         accumulate(b, gb);
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t period = broadcast_period("mul", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] * bd[i % period];
  }
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [a, b, period](std::span<const double> g) {
                       auto ad = a.data();
                       auto bd = b.data();
                       if (a.requires_grad()) {
                         std::vector<double> ga(g.size());
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga[i] = g[i] * bd[i % period];
                         }
                         accumulate(a, ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(period, 0.0);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gb[i % period] += g[i] * ad[i];
                         }
                         accumulate(b, gb);
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] * factor;
  }
  return make_result("scale", a.shape(), std::move(out), {a},
                     [a, factor](std::span<const double> g) {
                       std::vector<double> ga(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] = g[i] * factor;
                       }
                       accumulate(a, ga);
                     });
}

Tensor relu(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  }
  return make_result("relu", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto ad = a.data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = ad[i] > 0.0 ? g[i] : 0.0;
    }
    accumulate(a, ga);
  });
}

Tensor exp(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(ad[i]);
  }
  auto values = out;
  return make_result("exp", a.shape(), std::move(out), {a},
                     [a, values = std::move(values)](std::span<const double> g) {
                       std::vector<double> ga(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] = g[i] * values[i];
                       }
                       accumulate(a, ga);
                     });
}

Tensor log(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(ad[i] > 0.0)) {
      throw DomainError("log: non-positive input at index " + std::to_string(i));
    }
    out[i] = std::log(ad[i]);
  }
  return make_result("log", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto ad = a.data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] / ad[i];
    }
    accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  auto ad = a.data();
  double total = 0.0;
  for (double v : ad) {
    total += v;
  }
  const std::size_t n = ad.size();
  return make_result("sum", {}, {total}, {a}, [a, n](std::span<const double> g) {
    accumulate(a, std::vector<double>(n, g[0]));
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + axis));
  const std::size_t len = s[axis];
  const std::size_t inner = shape_size(Shape(s.begin() + axis + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);
  auto ad = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) {
        out[o * inner + i] += ad[(o * len + l) * inner + i];
      }
    }
  }
  return make_result("sum_axis", std::move(out_shape), std::move(out), {a},
                     [a, outer, len, inner](std::span<const double> g) {
                       std::vector<double> ga(outer * len * inner);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t l = 0; l < len; ++l) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             ga[(o * len + l) * inner + i] = g[o * inner + i];
                           }
                         }
                       }
                       accumulate(a, ga);
                     });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor norm2(const Tensor& a) {
  auto ad = a.data();
  double sq = 0.0;
  for (double v : ad) {
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  return make_result("norm2", {}, {norm}, {a}, [a, norm](std::span<const double> g) {
    auto ad = a.data();
    std::vector<double> ga(ad.size(), 0.0);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < ad.size(); ++i) {
        ga[i] = g[0] * ad[i] / norm;
      }
    }
    accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Distributions

namespace {

void check_no_nan(std::string_view op, std::span<const double> values) {
  for (double v : values) {
    if (std::isnan(v)) {
      throw NumericError(std::string(op) + ": NaN input");
    }
  }
}

std::vector<double> softmax_rows(std::span<const double> z, Rows r) {
  std::vector<double> out(z.size());
  for (std::size_t row = 0; row < r.count; ++row) {
    const double* in = z.data() + row * r.width;
    double* o = out.data() + row * r.width;
    const double mx = *std::max_element(in, in + r.width);
    double denom = 0.0;
    for (std::size_t k = 0; k < r.width; ++k) {
      o[k] = std::exp(in[k] - mx);
      denom += o[k];
    }
    for (std::size_t k = 0; k < r.width; ++k) {
      o[k] /= denom;
    }
  }
  return out;
}

std::vector<double> log_softmax_rows(std::span<const double> z, Rows r) {
  std::vector<double> out(z.size());
  for (std::size_t row = 0; row < r.count; ++row) {
    const double* in = z.data() + row * r.width;
    double* o = out.data() + row * r.width;
    const double mx = *std::max_element(in, in + r.width);
    double denom = 0.0;
    for (std::size_t k = 0; k < r.width; ++k) {
      denom += std::exp(in[k] - mx);
    }
    const double lse = mx + std::log(denom);
    for (std::size_t k = 0; k < r.width; ++k) {
      o[k] = in[k] - lse;
    }
  }
  return out;
}

void check_distribution_rows(std::string_view op, std::string_view arg,
                             std::span<const double> p, Rows r) {
  for (std::size_t row = 0; row < r.count; ++row) {
    double total = 0.0;
    for (std::size_t k = 0; k < r.width; ++k) {
      const double v = p[row * r.width + k];
      if (!(v >= 0.0)) {
        throw DomainError(std::string(op) + ": " + std::string(arg) + " row " +
                          std::to_string(row) + " has a negative entry");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > kDistributionTolerance) {
      throw DomainError(std::string(op) + ": " + std::string(arg) + " row " +
                        std::to_string(row) + " sums to " + std::to_string(total));
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  const Rows r = as_rows("softmax", logits);
  check_no_nan("softmax", logits.data());
  auto out = softmax_rows(logits.data(), r);
  auto probs = out;
  return make_result("softmax", logits.shape(), std::move(out), {logits},
                     [logits, r, probs = std::move(probs)](std::span<const double> g) {
                       std::vector<double> gz(g.size());
                       for (std::size_t row = 0; row < r.count; ++row) {
                         const std::size_t base = row * r.width;
                         double dot = 0.0;
                         for (std::size_t k = 0; k < r.width; ++k) {
                           dot += g[base + k] * probs[base + k];
                         }
                         for (std::size_t k = 0; k < r.width; ++k) {
                           gz[base + k] = probs[base + k] * (g[base + k] - dot);
                         }
                       }
                       accumulate(logits, gz);
                     });
}

Tensor log_softmax(const Tensor& logits) {
  const Rows r = as_rows("log_softmax", logits);
  check_no_nan("log_softmax", logits.data());
  auto out = log_softmax_rows(logits.data(), r);
  auto probs = softmax_rows(logits.data(), r);
  return make_result("log_softmax", logits.shape(), std::move(out), {logits},
                     [logits, r, probs = std::move(probs)](std::span<const double> g) {
                       std::vector<double> gz(g.size());
                       for (std::size_t row = 0; row < r.count; ++row) {
                         const std::size_t base = row * r.width;
                         double gsum = 0.0;
                         for (std::size_t k = 0; k < r.width; ++k) {
                           gsum += g[base + k];
                         }
                         for (std::size_t k = 0; k < r.width; ++k) {
                           gz[base + k] = g[base + k] - probs[base + k] * gsum;
                         }
                       }
                       accumulate(logits, gz);
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Rows r = as_rows("cross_entropy", logits);
  if (labels.size() != r.count) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(r.count) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= r.width) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(r.width) + ")");
    }
  }
  check_no_nan("cross_entropy", logits.data());
  const auto logp = log_softmax_rows(logits.data(), r);
  double total = 0.0;
  for (std::size_t row = 0; row < r.count; ++row) {
    total -= logp[row * r.width + static_cast<std::size_t>(labels[row])];
  }
  const double inv_b = 1.0 / static_cast<double>(r.count);
  std::vector<int> targets(labels.begin(), labels.end());
  return make_result(
      "cross_entropy", {}, {total * inv_b}, {logits},
      [logits, r, inv_b, targets = std::move(targets)](std::span<const double> g) {
        auto probs = softmax_rows(logits.data(), r);
        for (std::size_t row = 0; row < r.count; ++row) {
          probs[row * r.width + static_cast<std::size_t>(targets[row])] -= 1.0;
        }
        for (double& v : probs) {
          v *= g[0] * inv_b;
        }
        accumulate(logits, probs);
      });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_divergence: shapes " + shape_str(p.shape()) + " and " +
                     shape_str(q.shape()) + " differ");
  }
  const Rows r = as_rows("kl_divergence", p);
  check_distribution_rows("kl_divergence", "p", p.data(), r);
  check_distribution_rows("kl_divergence", "q", q.data(), r);
  auto pd = p.data();
  auto qd = q.data();
  double total = 0.0;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    if (pd[i] > 0.0) {
      total += pd[i] * std::log(pd[i] / std::max(qd[i], kKlClamp));
    }
  }
  const double inv_b = 1.0 / static_cast<double>(r.count);
  return make_result("kl_divergence", {}, {total * inv_b}, {p, q},
                     [p, q, inv_b](std::span<const double> g) {
                       auto pd = p.data();
                       auto qd = q.data();
                       const double s = g[0] * inv_b;
                       if (p.requires_grad()) {
                         std::vector<double> gp(pd.size(), 0.0);
                         for (std::size_t i = 0; i < pd.size(); ++i) {
                           if (pd[i] > 0.0) {
                             gp[i] = s * (std::log(pd[i] / std::max(qd[i], kKlClamp)) + 1.0);
                           }
                         }
                         accumulate(p, gp);
                       }
                       if (q.requires_grad()) {
                         std::vector<double> gq(qd.size(), 0.0);
                         for (std::size_t i = 0; i < qd.size(); ++i) {
                           if (qd[i] >= kKlClamp) {
                             gq[i] = -s * pd[i] / qd[i];
                           }
                         }
                         accumulate(q, gq);
                       }
                     });
}

Tensor mean_squared_l2(const Tensor& f, const Tensor& g) {
  if (f.shape() != g.shape()) {
    throw ShapeError("mean_squared_l2: shapes " + shape_str(f.shape()) + " and " +
                     shape_str(g.shape()) + " differ");
  }
  const Rows r = as_rows("mean_squared_l2", f);
  auto fd = f.data();
  auto gd = g.data();
  double total = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double d = fd[i] - gd[i];
    total += d * d;
  }
  const double inv_b = 1.0 / static_cast<double>(r.count);
  return make_result("mean_squared_l2", {}, {total * inv_b}, {f, g},
                     [f, g, inv_b](std::span<const double> gout) {
                       auto fd = f.data();
                       auto gd = g.data();
                       std::vector<double> diff(fd.size());
                       for (std::size_t i = 0; i < fd.size(); ++i) {
                         diff[i] = 2.0 * inv_b * gout[0] * (fd[i] - gd[i]);
                       }
                       accumulate(f, diff);
                       if (g.requires_grad()) {
                         for (double& v : diff) {
                           v = -v;
                         }
                         accumulate(g, diff);
                       }
                     });
}

}  // namespace funcreg
