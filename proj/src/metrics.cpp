#include "funcreg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "funcreg/error.hpp"

namespace funcreg {

using nlohmann::json;

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0);
  const std::size_t k = logits.dim(1);
  auto d = logits.data();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (d[r * k + c] > d[r * k + best]) {
        best = c;
      }
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

double accuracy(std::span<const int> labels, std::span<const int> preds) {
  if (labels.size() != preds.size() || labels.empty()) {
    throw ShapeError("accuracy: labels and predictions must be equal-length and non-empty");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hit += labels[i] == preds[i] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

struct Confusion {
  std::vector<std::size_t> tp, fp, fn, support;
};

Confusion confusion(std::span<const int> labels, std::span<const int> preds, std::size_t k) {
  if (labels.size() != preds.size()) {
    throw ShapeError("labels and predictions differ in length");
  }
  Confusion c{std::vector<std::size_t>(k), std::vector<std::size_t>(k),
              std::vector<std::size_t>(k), std::vector<std::size_t>(k)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto p = static_cast<std::size_t>(preds[i]);
    if (y >= k || p >= k) {
      throw IndexError("class index outside [0, " + std::to_string(k) + ")");
    }
    ++c.support[y];
    if (y == p) {
      ++c.tp[y];
    } else {
      ++c.fp[p];
      ++c.fn[y];
    }
  }
  return c;
}

}  // namespace

double macro_recall(std::span<const int> labels, std::span<const int> preds,
                    std::size_t num_classes) {
  const auto c = confusion(labels, preds, num_classes);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (c.support[k] == 0) {
      continue;
    }
    total += static_cast<double>(c.tp[k]) / static_cast<double>(c.support[k]);
    ++present;
  }
  return present ? total / static_cast<double>(present) : 0.0;
}

double macro_f1(std::span<const int> labels, std::span<const int> preds, std::size_t num_classes) {
  const auto c = confusion(labels, preds, num_classes);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (c.support[k] == 0) {
      continue;
    }
    const double denom = 2.0 * static_cast<double>(c.tp[k]) + static_cast<double>(c.fp[k]) +
                         static_cast<double>(c.fn[k]);
    total += denom > 0.0 ? 2.0 * static_cast<double>(c.tp[k]) / denom : 0.0;
    ++present;
  }
  return present ? total / static_cast<double>(present) : 0.0;
}

SplitMetrics metrics_from_logits(const std::string& split, const Tensor& logits,
                                 std::span<const int> labels) {
  const auto preds = argmax_rows(logits);
  const std::size_t k = logits.dim(1);
  SplitMetrics m;
  m.split = split;
  m.n = labels.size();
  m.accuracy = accuracy(labels, preds);
  m.loss = cross_entropy(logits, labels).item();
  m.recall_macro = macro_recall(labels, preds, k);
  m.f1_macro = macro_f1(labels, preds, k);
  return m;
}

SplitMetrics evaluate(const ModelParams& params, const Dataset& split) {
  if (split.num_classes != params.head.num_classes()) {
    throw ShapeError("split '" + split.name + "' has " + std::to_string(split.num_classes) +
                     " classes but the head has " + std::to_string(params.head.num_classes()));
  }
  return metrics_from_logits(split.name, forward_logits(params, split.features_tensor()),
                             split.labels);
}

const SplitMetrics& MetricsReport::at(const std::string& split) const {
  for (const auto& s : splits) {
    if (s.split == split) {
      return s;
    }
  }
  throw IndexError("report has no split '" + split + "'");
}

MetricsReport make_report(std::vector<SplitMetrics> splits, std::vector<std::string> ood_splits) {
  MetricsReport r;
  r.splits = std::move(splits);
  r.ood_splits = std::move(ood_splits);
  double total = 0.0;
  for (const auto& name : r.ood_splits) {
    total += r.at(name).accuracy;
  }
  r.ood_avg = r.ood_splits.empty() ? 0.0 : total / static_cast<double>(r.ood_splits.size());
  return r;
}

MetricsReport evaluate_all(const ModelParams& params, const Dataset& id_test,
                           std::span<const Dataset> ood_tests) {
  std::vector<SplitMetrics> splits{evaluate(params, id_test)};
  std::vector<std::string> names;
  for (const auto& d : ood_tests) {
    splits.push_back(evaluate(params, d));
    names.push_back(d.name);
  }
  return make_report(std::move(splits), std::move(names));
}

json to_json(const MetricsReport& report) {
  json splits = json::array();
  for (const auto& s : report.splits) {
    splits.push_back({{"split", s.split},
                      {"acc", s.accuracy},
                      {"loss", s.loss},
                      {"recall_macro", s.recall_macro},
                      {"f1_macro", s.f1_macro},
                      {"n", s.n}});
  }
  return {{"splits", splits}, {"ood_splits", report.ood_splits}, {"ood_avg", report.ood_avg}};
}

MetricsReport report_from_json(const json& j) {
  try {
    std::vector<SplitMetrics> splits;
    for (const auto& s : j.at("splits")) {
      splits.push_back({s.at("split").get<std::string>(), s.at("acc").get<double>(),
                        s.at("loss").get<double>(), s.at("recall_macro").get<double>(),
                        s.at("f1_macro").get<double>(), s.at("n").get<std::size_t>()});
    }
    return make_report(std::move(splits), j.at("ood_splits").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw ParseError(std::string("metrics report: ") + e.what(), 0);
  }
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_report_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << "split,acc,loss,recall_macro,f1_macro,n\n";
  for (const auto& s : report.splits) {
    out << s.split << ',' << format_double(s.accuracy) << ',' << format_double(s.loss) << ','
        << format_double(s.recall_macro) << ',' << format_double(s.f1_macro) << ',' << s.n
        << '\n';
  }
}

Tensor select_rows(const Tensor& table, std::span<const int> rows) {
  const std::size_t width = table.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * width);
  auto d = table.data();
  for (int r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= table.dim(0)) {
      throw IndexError("row " + std::to_string(r) + " outside the prototype table");
    }
    const auto start = d.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * width);
    out.insert(out.end(), start, start + static_cast<std::ptrdiff_t>(width));
  }
  return Tensor::from_data({rows.size(), width}, std::move(out));
}

SplitMetrics zero_shot_transfer_eval(const Tensor& pretrained_prototypes,
                                     const EncoderParams& encoder, const Dataset& split,
                                     std::span<const int> heldout_classes,
                                     std::span<const int> finetune_classes) {
  for (int c : heldout_classes) {
    if (std::find(finetune_classes.begin(), finetune_classes.end(), c) != finetune_classes.end()) {
      throw ConfigError("held-out class " + std::to_string(c) + " is also a fine-tuning class");
    }
  }
  if (split.num_classes != heldout_classes.size()) {
    throw ShapeError("held-out split class count does not match the held-out class list");
  }
  PrototypeHead head{select_rows(pretrained_prototypes, heldout_classes).detach(), false};
  ModelParams frozen{encoder, head};
  auto m = metrics_from_logits(split.name, forward_logits(frozen, split.features_tensor()),
                               split.labels);
  return m;
}

}  // namespace funcreg
