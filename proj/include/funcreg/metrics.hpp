#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "funcreg/data.hpp"
#include "funcreg/model.hpp"
#include "json.hpp"

namespace funcreg {

struct SplitMetrics {
  std::string split;
  double accuracy = 0.0;
  double loss = 0.0;  // mean cross-entropy
  double recall_macro = 0.0;
  double f1_macro = 0.0;
  std::size_t n = 0;
};

/// Row-wise argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

/// Unweighted mean over classes that occur in `labels`; classes with no true
/// instance are left out of the mean.
double macro_recall(std::span<const int> labels, std::span<const int> preds, std::size_t num_classes);
double macro_f1(std::span<const int> labels, std::span<const int> preds, std::size_t num_classes);
double accuracy(std::span<const int> labels, std::span<const int> preds);

SplitMetrics metrics_from_logits(const std::string& split, const Tensor& logits,
                                 std::span<const int> labels);
SplitMetrics evaluate(const ModelParams& params, const Dataset& split);

struct MetricsReport {
  std::vector<SplitMetrics> splits;
  std::vector<std::string> ood_splits;  // names of the OOD entries in `splits`
  double ood_avg = 0.0;

  const SplitMetrics& at(const std::string& split) const;
};

/// Builds a report and fills ood_avg as the arithmetic mean of the OOD
/// accuracies (0 when there are none).
MetricsReport make_report(std::vector<SplitMetrics> splits, std::vector<std::string> ood_splits);
MetricsReport evaluate_all(const ModelParams& params, const Dataset& id_test,
                           std::span<const Dataset> ood_tests);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

/// CSV `split,acc,loss,recall_macro,f1_macro,n`.
void write_report_csv(const MetricsReport& report, const std::filesystem::path& path);

/// Classifies held-out-class examples with the frozen pretrained prototype
/// rows of `heldout_classes` and the given encoder. Labels in `split` index
/// into `heldout_classes`. Throws ConfigError when the held-out classes
/// overlap the fine-tuning classes.
SplitMetrics zero_shot_transfer_eval(const Tensor& pretrained_prototypes,
                                     const EncoderParams& encoder, const Dataset& split,
                                     std::span<const int> heldout_classes,
                                     std::span<const int> finetune_classes);

/// Rows of a prototype table, in the given order.
Tensor select_rows(const Tensor& table, std::span<const int> rows);

}  // namespace funcreg
