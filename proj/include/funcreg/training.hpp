#pragma once

// Pretraining and fine-tuning loops. Fine-tuning follows the regularized
// recipe: sample a batch, draw its augmented copy, evaluate the combined
// objective, backpropagate, take one AdamW step.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "funcreg/augment.hpp"
#include "funcreg/data.hpp"
#include "funcreg/metrics.hpp"
#include "funcreg/model.hpp"
#include "funcreg/regularizers.hpp"
#include "json.hpp"

namespace funcreg {

enum class Schedule { constant, cosine };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 50;
  Schedule schedule = Schedule::cosine;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  RegularizerConfig regularizer;
  AugmentPolicy augment;
  /// Evaluate every N steps (0: only at the end of training).
  std::size_t eval_every = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Reads the "train" section; regularizer/augment sections are separate.
/// Keys absent from the JSON keep their value from `base`.
TrainConfig train_config_from_json(const nlohmann::json& train, const TrainConfig& base = {});
AugmentPolicy augment_from_json(const nlohmann::json& j, const AugmentPolicy& base = {});
nlohmann::json to_json(const AugmentPolicy& policy);

/// Moments and step count of AdamW, one entry per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::size_t step = 0;
};

/// Bias-corrected AdamW with decoupled weight decay:
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws NumericError naming the first parameter whose gradient is
/// non-finite.
void optimizer_step(std::span<NamedTensor> params, AdamState& state, double lr, double wd,
                    double beta1, double beta2, double eps);

/// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps (or a
/// constant peak).
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  std::optional<double> loss_far;
  std::optional<double> loss_fcr;
  std::optional<double> loss_reg;
  double grad_norm = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  SplitMetrics metrics;
};

class RunLog {
 public:
  /// Steps must be strictly increasing.
  void add_step(StepRecord record);
  /// Eval steps must be non-decreasing (one step evaluates several splits).
  void add_eval(std::size_t step, SplitMetrics metrics);

  const std::vector<StepRecord>& steps() const noexcept { return steps_; }
  const std::vector<EvalRecord>& evals() const noexcept { return evals_; }
  bool empty() const noexcept { return steps_.empty() && evals_.empty(); }

  /// `step,lr,loss_ce,loss_far,loss_fcr,loss_reg,grad_norm`; absent terms are
  /// empty cells.
  void write_steps_csv(const std::filesystem::path& path) const;
  /// `step,split,acc,loss,recall_macro,f1_macro`.
  void write_evals_csv(const std::filesystem::path& path) const;

 private:
  std::vector<StepRecord> steps_;
  std::vector<EvalRecord> evals_;
};

/// Everything a step observer may need to replay the step.
struct StepContext {
  std::size_t step;
  const ModelState& model;  // parameters before the update
  const Batch& batch;
  const Tensor& x_aug;      // undefined when the method needs no augmentation
  const RegularizerInputs& inputs;
  const LossBreakdown& loss;
};

using StepObserver = std::function<void(const StepContext&)>;

/// Key of the augmentation draw of a training step.
std::uint64_t step_seed(const TrainConfig& cfg, std::size_t step);

/// Trainable tensors of the live parameters (the head only when trainable).
std::vector<NamedTensor> trainable_parameters(ModelParams& params);

/// Runs the regularized fine-tuning loop. Takes the snapshot on entry, so
/// the alignment target is exactly the starting point. Evaluates
/// `eval_splits` every cfg.eval_every steps and after the last step.
RunLog finetune(ModelState& m, const Dataset& train, const TrainConfig& cfg,
                std::span<const Dataset> eval_splits = {}, const StepObserver& observer = {});

/// Plain cross-entropy training of encoder and head over the broad
/// pretraining split.
RunLog pretrain(ModelState& m, const Dataset& train, const TrainConfig& cfg,
                std::span<const Dataset> eval_splits = {});

/// Default recipes used by the CLI and the experiment drivers.
TrainConfig default_pretrain_config();
TrainConfig default_finetune_config();
ModelArch default_arch(std::size_t num_classes);

/// Pretrained parameters restricted to the head rows of `classes`, ready
/// for fine-tuning on a task over those classes.
ModelParams finetune_start(const ModelParams& pretrained, std::span<const int> classes,
                           bool train_head);

}  // namespace funcreg
