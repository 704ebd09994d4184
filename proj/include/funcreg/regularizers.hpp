#pragma once

// Fine-tuning objectives: cross-entropy plus one of
//   - functional alignment (FAR): mean squared output distance to the frozen
//     snapshot on augmented inputs,
//   - functional consistency (FCR): KL from clean to augmented predictions,
//   - both (FAR + FCR),
//   - or one of the weight/feature/logit-space baselines (L2-SP, LDIFS,
//     CAR-FT, Lipsum-FT, EMA self-distillation).
//
// Snapshot and EMA branches are evaluated on parameters that never require
// gradients, so their tensors stay off the tape.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "funcreg/model.hpp"
#include "funcreg/tensor.hpp"
#include "json.hpp"

namespace funcreg {

enum class RegMethod { none, far, fcr, far_fcr, l2sp, ldifs, car, lipsum, ema_distill };
enum class OutputSpace { probabilities, logits };

std::string_view to_string(RegMethod method);
RegMethod reg_method_from_string(std::string_view name);
std::string_view to_string(OutputSpace space);
OutputSpace output_space_from_string(std::string_view name);

struct RegularizerConfig {
  RegMethod method = RegMethod::none;
  double lambda_far = 1.0;       // weight of FAR
  double lambda_fcr = 1.0;       // weight of FCR
  double lambda_baseline = 1.0;  // weight of whichever baseline is selected
  std::size_t lipsum_probes = 80;
  std::size_t car_contexts = 8;
  double ema_decay = 0.999;
  OutputSpace output_space = OutputSpace::probabilities;

  void validate() const;
  /// Non-fatal inconsistencies, e.g. a weight set for a term the method
  /// never uses.
  std::vector<std::string> warnings() const;
  bool uses_augmentation() const;
};

nlohmann::json to_json(const RegularizerConfig& cfg);
RegularizerConfig regularizer_from_json(const nlohmann::json& j, const RegularizerConfig& base = {});

/// Logits or softmax probabilities, per `space`.
Tensor model_output(const ModelParams& params, const Tensor& x, OutputSpace space);

Tensor far_loss(const ModelState& m, const Tensor& x_aug,
                OutputSpace space = OutputSpace::probabilities);
Tensor fcr_loss(const ModelState& m, const Tensor& x, const Tensor& x_aug);
/// Squared distance of encoder parameters to the snapshot encoder.
Tensor l2sp_loss(const ModelState& m);
Tensor ldifs_loss(const ModelState& m, const Tensor& x);

/// C x D matrix of unit-norm rows, standing in for context text embeddings.
Tensor make_context_prototypes(std::size_t count, std::size_t dim, std::uint64_t seed);
Tensor car_loss(const ModelState& m, const Tensor& x, const Tensor& context_prototypes);

/// M random unit probes in R^D, keyed by `step_seed`.
Tensor make_lipsum_probes(std::size_t count, std::size_t dim, std::uint64_t step_seed);
/// Mean over the batch of (1/2M) sum_i (probe_i . (phi - phi0))^2.
Tensor lipsum_loss(const ModelState& m, const Tensor& x, const Tensor& probes);
Tensor lipsum_loss(const ModelState& m, const Tensor& x, std::size_t count,
                   std::uint64_t step_seed);

/// KL(EMA-teacher class probabilities || student class probabilities).
Tensor ema_distill_loss(const ModelState& m, const Tensor& x);

struct LossBreakdown {
  Tensor total;
  double ce = 0.0;
  std::optional<double> far;
  std::optional<double> fcr;
  std::optional<double> reg;  // selected baseline, unweighted
};

/// Per-run inputs that some regularizers need besides the batch.
struct RegularizerInputs {
  Tensor context_prototypes;    // CAR
  std::uint64_t step_seed = 0;  // Lipsum probe draw
};

/// CE + the weighted terms selected by cfg.method. x_aug may be undefined
/// when the method does not use augmentation.
LossBreakdown combined_loss(const ModelState& m, const Tensor& x, std::span<const int> labels,
                            const Tensor& x_aug, const RegularizerConfig& cfg,
                            const RegularizerInputs& inputs = {});

}  // namespace funcreg
