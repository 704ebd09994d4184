#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap shared handle. Data is immutable once an op has
// produced it; only the gradient slot changes during backward. Leaf
// parameters may be updated in place through mutable_data() between tapes.
//
// Ops record onto the GradientTape that is active on the calling thread
// (see GradientTape::Scope) whenever at least one input requires a
// gradient. Without an active tape every op is a plain evaluation.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace funcreg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;

class GradientTape;

class Tensor {
 public:
  struct Impl;

  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);
  /// Leaf tensor that accumulates a gradient during backward.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::span<const double> data() const;
  /// Value of a single-element tensor.
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  /// Throws StateError when no gradient has been accumulated.
  std::span<const double> grad() const;
  /// Drops the gradient slot entirely (has_grad() becomes false).
  void clear_grad();
  /// Node index on the tape that produced this tensor, if any.
  std::optional<std::size_t> tape_id() const;

  /// In-place access for optimizer updates. Only leaf tensors that are not
  /// referenced by a live tape may be modified.
  std::span<double> mutable_data();

  /// Same values, no tape linkage, no gradient requirement.
  Tensor detach() const;
  /// Deep copy of the data with the requested gradient flag.
  Tensor clone(bool requires_grad) const;

  const std::shared_ptr<Impl>& impl() const noexcept { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  friend class GradientTape;
  friend Tensor make_result(std::string_view, Shape, std::vector<double>,
                            std::vector<Tensor>,
                            std::function<void(std::span<const double>)>);
};

/// Append-only record of differentiable ops. Nodes are stored in creation
/// order, which is a topological order of the computation graph.
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;
  ~GradientTape();

  /// Makes a tape the active one for the current thread for the scope's
  /// lifetime. Scopes nest; the previous tape is restored on exit.
  class Scope {
   public:
    explicit Scope(GradientTape& tape);
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope();

   private:
    GradientTape* previous_;
  };

  static GradientTape* active() noexcept;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view node_kind(std::size_t id) const { return nodes_.at(id).kind; }

  /// Reverse sweep from a scalar loss recorded on this tape. Gradients are
  /// added to whatever is already in the grad slots.
  void backward(const Tensor& loss);

  /// Number of node backward functions executed by the last backward().
  std::size_t last_visit_count() const noexcept { return last_visits_; }

 private:
  struct Node {
    std::string_view kind;
    std::shared_ptr<Tensor::Impl> output;
    std::function<void(std::span<const double>)> backward;
  };

  std::size_t record(std::string_view kind, std::shared_ptr<Tensor::Impl> output,
                     std::function<void(std::span<const double>)> backward);

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;

  friend Tensor make_result(std::string_view, Shape, std::vector<double>,
                            std::vector<Tensor>,
                            std::function<void(std::span<const double>)>);
};

/// Runs backward on the thread's active tape.
void backward(const Tensor& loss);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise. The second operand of add/sub/mul may match the trailing
// dimensions of the first, in which case it is broadcast over the leading
// ones.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; non-positive input raises DomainError.
Tensor log(const Tensor& a);

// Reductions
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);
/// Euclidean norm of all entries.
Tensor norm2(const Tensor& a);

// Trailing-axis distributions. Rank-1 inputs are treated as one row.
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);

/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean over rows of sum_k p_k ln(p_k / q_k). Terms with p_k = 0 vanish and q
/// is clamped below at kKlClamp. Gradients reach both arguments.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
inline constexpr double kKlClamp = 1e-12;
inline constexpr double kDistributionTolerance = 1e-9;

/// (1/B) sum_i sum_k (f_ik - g_ik)^2.
Tensor mean_squared_l2(const Tensor& f, const Tensor& g);

inline Tensor detach(const Tensor& t) { return t.detach(); }

}  // namespace funcreg
