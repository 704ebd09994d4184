#pragma once

// Experimental instruments: robustness to perturbations in four spaces,
// the FAR/FCR ablation matrix and the weight-interpolation sweep.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "funcreg/data.hpp"
#include "funcreg/metrics.hpp"
#include "funcreg/model.hpp"
#include "funcreg/training.hpp"

namespace funcreg {

enum class PerturbSpace { parameter, feature, logit, function };

std::string_view to_string(PerturbSpace space);
/// Throws ConfigError for an unknown name.
PerturbSpace perturb_space_from_string(std::string_view name);
std::vector<PerturbSpace> all_perturb_spaces();

/// How parameter-space magnitudes are read: as absolute step lengths or as a
/// percentage of the flattened parameter norm.
enum class ParameterScale { absolute, relative_norm_pct };

struct Direction {
  PerturbSpace space = PerturbSpace::logit;
  /// Unit vector for the parameter, feature and logit spaces.
  std::vector<double> unit;
  /// Random auxiliary network for the function space.
  std::optional<EncoderParams> function;
  /// Normalization constant c of the auxiliary network. When absent,
  /// perturbed_eval normalizes on the split being evaluated.
  std::optional<double> function_scale;
};

/// Hidden width of the auxiliary network of a function-space direction.
inline constexpr std::size_t kFunctionDirectionHidden = 64;

/// Seeded unit direction compatible with `params`. When `normalize_on` is
/// given, function directions get their constant c from that split.
Direction sample_unit_direction(PerturbSpace space, const ModelParams& params,
                                std::uint64_t seed, const Dataset* normalize_on = nullptr);

/// c = sqrt(mean_i ||g(x_i)||^2) over the split.
double function_norm(const EncoderParams& g, const Dataset& split);

/// Logits of the perturbed model on the split.
Tensor perturbed_logits(const ModelParams& params, const Direction& direction, double magnitude,
                        const Dataset& split);

struct PerturbedMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Never mutates `params`. Throws ShapeError when the direction does not fit
/// the model.
PerturbedMetrics perturbed_eval(const ModelParams& params, const Direction& direction,
                                double magnitude, const Dataset& split);

struct PerturbationSpec {
  std::vector<PerturbSpace> spaces = all_perturb_spaces();
  std::size_t n_directions = 10;
  std::vector<double> magnitudes = {0.1, 0.2, 0.3, 0.4, 0.5, 1.0};
  /// Parameter-space magnitudes; empty means `magnitudes`.
  std::vector<double> parameter_magnitudes = {0.0004};
  ParameterScale parameter_scale = ParameterScale::absolute;
  std::uint64_t seed = 0;

  const std::vector<double>& magnitudes_for(PerturbSpace space) const;
  /// Throws ConfigError on an empty or negative magnitude list or zero
  /// directions.
  void validate() const;
};

struct PerturbationRecord {
  PerturbSpace space;
  std::size_t direction = 0;
  double magnitude = 0.0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct PerturbationAggregate {
  PerturbSpace space;
  double magnitude = 0.0;
  std::string split;
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  std::size_t n = 0;
};

struct PerturbationReport {
  std::vector<SplitMetrics> baseline;  // unperturbed, one per split
  std::vector<PerturbationRecord> records;
  std::vector<PerturbationAggregate> aggregates;

  /// Baseline accuracy minus the mean perturbed accuracy over all
  /// directions and magnitudes of the space on the split.
  double mean_accuracy_drop(PerturbSpace space, const std::string& split) const;
  double mean_loss_increase(PerturbSpace space, const std::string& split) const;
};

/// Full sweep, deterministic in spec.seed. Direction d of a space uses the
/// same auxiliary network on every split; c is computed per split.
PerturbationReport run_perturbation_study(const ModelParams& params, const PerturbationSpec& spec,
                                          std::span<const Dataset> splits);

/// `space,direction,magnitude,split,loss,acc`.
void write_perturbation_csv(const PerturbationReport& report, const std::filesystem::path& path);
/// `space,magnitude,split,loss_mean,loss_std,acc_mean,acc_std,n`.
void write_perturbation_aggregate_csv(const PerturbationReport& report,
                                      const std::filesystem::path& path);
/// Two charts (loss and accuracy vs magnitude, one line per space and
/// split), written as `<stem>_loss.svg` and `<stem>_acc.svg`.
void write_perturbation_svgs(const PerturbationReport& report, const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string name;
  RegMethod method;
};

/// FT, FT+FAR, FT+FCR, FT+FAR+FCR.
std::vector<AblationVariant> ablation_variants();

struct AblationInputs {
  const BenchmarkSplits* splits = nullptr;
  /// Pretrained model over all global classes.
  const ModelParams* pretrained = nullptr;
  std::vector<int> task_classes;
  /// Needed for the held-out zero-shot column; may be empty.
  std::vector<int> heldout_classes;
  bool train_head = true;
};

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  MetricsReport report;
  /// Zero-shot accuracy on the held-out classes, when available.
  std::optional<double> heldout_acc;
  /// Function distance to the starting point on the ID test split.
  double function_distance = 0.0;
  ModelParams params;
};

struct AblationRow {
  std::string variant;
  double id_mean = 0.0;
  double id_std = 0.0;
  double ood_mean = 0.0;
  double ood_std = 0.0;
  /// Accuracy minus the pretrained accuracy, in points of accuracy.
  double id_gain = 0.0;
  double ood_gain = 0.0;
  std::optional<double> heldout_mean;
  std::optional<double> heldout_std;
};

struct AblationResult {
  MetricsReport pretrained;
  std::optional<double> pretrained_heldout_acc;
  std::vector<AblationRun> runs;  // variant-major, then seed
  std::vector<AblationRow> rows;  // one per variant
};

/// Fine-tunes every variant with every seed from the same pretrained
/// start. Runs are independent and execute in parallel.
AblationResult run_ablation(const AblationInputs& inputs, const TrainConfig& base_cfg,
                            std::span<const std::uint64_t> seeds,
                            std::span<const AblationVariant> variants = {});

/// `variant,id_mean,id_std,ood_mean,ood_std,id_gain,ood_gain,heldout_mean,heldout_std`.
void write_ablation_csv(const AblationResult& result, const std::filesystem::path& path);
/// `variant,seed,split,acc,loss,recall_macro,f1_macro,n`.
void write_ablation_runs_csv(const AblationResult& result, const std::filesystem::path& path);

/// Mean squared L2 distance between the two models' outputs on the split.
double function_distance(const ModelParams& a, const ModelParams& b, const Dataset& split,
                         OutputSpace space = OutputSpace::probabilities);

// ---------------------------------------------------------------------------
// Interpolation

struct InterpolationPoint {
  double alpha = 0.0;
  SplitMetrics metrics;
};

/// Evaluates interpolate_weights(theta0, theta_ft, alpha) on every split,
/// alpha-major.
std::vector<InterpolationPoint> run_interpolation_sweep(const ModelParams& theta0,
                                                        const ModelParams& theta_ft,
                                                        std::span<const double> alphas,
                                                        std::span<const Dataset> splits);

/// `start:end:step`; the last value is exactly `end`. Throws ConfigError on
/// malformed ranges or values outside [0, 1].
std::vector<double> parse_alpha_range(std::string_view text);

/// `alpha,split,acc,loss,recall_macro,f1_macro`.
void write_interpolation_csv(std::span<const InterpolationPoint> curve,
                             const std::filesystem::path& path);
void write_interpolation_svg(std::span<const InterpolationPoint> curve,
                             const std::filesystem::path& path);

/// Sample mean and standard deviation (0 for fewer than two values).
double mean_of(std::span<const double> values);
double stddev_of(std::span<const double> values);

}  // namespace funcreg
