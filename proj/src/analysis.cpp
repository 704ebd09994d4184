#include "funcreg/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "funcreg/error.hpp"
#include "funcreg/parallel.hpp"
#include "funcreg/rng.hpp"
#include "funcreg/svg.hpp"

namespace funcreg {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  return out;
}

std::string fmt(double v) { return format_double(v); }

std::vector<double> unit_gaussian(std::size_t n, Rng& rng) {
  std::vector<double> u(n);
  double sq = 0.0;
  for (double& v : u) {
    v = rng.normal(0.0, 1.0);
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  for (double& v : u) {
    v /= norm;
  }
  return u;
}

EncoderParams random_function(std::size_t d_in, std::size_t d_out, Rng& rng) {
  EncoderParams g;
  const std::size_t dims[] = {d_in, kFunctionDirectionHidden, d_out};
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> w(dims[i] * dims[i + 1]);
    const double sd = std::sqrt(2.0 / static_cast<double>(dims[i]));
    for (double& v : w) {
      v = rng.normal(0.0, sd);
    }
    std::vector<double> b(dims[i + 1]);
    for (double& v : b) {
      v = rng.normal(0.0, 0.1);
    }
    g.layers.push_back({Tensor::from_data({dims[i], dims[i + 1]}, std::move(w)),
                        Tensor::from_data({dims[i + 1]}, std::move(b))});
  }
  return g;
}

std::size_t space_index(PerturbSpace s) { return static_cast<std::size_t>(s); }

}  // namespace

std::string_view to_string(PerturbSpace space) {
  switch (space) {
    case PerturbSpace::parameter:
      return "parameter";
    case PerturbSpace::feature:
      return "feature";
    case PerturbSpace::logit:
      return "logit";
    case PerturbSpace::function:
      return "function";
  }
  return "unknown";
}

PerturbSpace perturb_space_from_string(std::string_view name) {
  for (auto s : all_perturb_spaces()) {
    if (to_string(s) == name) {
      return s;
    }
  }
  throw ConfigError("unknown perturbation space '" + std::string(name) + "'");
}

std::vector<PerturbSpace> all_perturb_spaces() {
  return {PerturbSpace::parameter, PerturbSpace::feature, PerturbSpace::logit,
          PerturbSpace::function};
}

// ---------------------------------------------------------------------------
// Directions

Direction sample_unit_direction(PerturbSpace space, const ModelParams& params, std::uint64_t seed,
                                const Dataset* normalize_on) {
  Rng rng(derive_seed({seed, 0xD1EC, space_index(space)}));
  Direction d;
  d.space = space;
  switch (space) {
    case PerturbSpace::parameter:
      d.unit = unit_gaussian(params.parameter_count(), rng);
      break;
    case PerturbSpace::feature:
      d.unit = unit_gaussian(params.encoder.output_dim(), rng);
      break;
    case PerturbSpace::logit:
      d.unit = unit_gaussian(params.head.num_classes(), rng);
      break;
    case PerturbSpace::function:
      d.function = random_function(params.encoder.input_dim(), params.head.num_classes(), rng);
      if (normalize_on != nullptr) {
        d.function_scale = function_norm(*d.function, *normalize_on);
      }
      break;
  }
  return d;
}

double function_norm(const EncoderParams& g, const Dataset& split) {
  if (split.empty()) {
    throw StateError("cannot normalize a function direction on an empty split");
  }
  const Tensor out = forward_encoder(g, split.features_tensor());
  double sq = 0.0;
  for (double v : out.data()) {
    sq += v * v;
  }
  const double c = std::sqrt(sq / static_cast<double>(split.size()));
  if (!(c > 0.0)) {
    throw NumericError("function direction vanishes on split '" + split.name + "'");
  }
  return c;
}

Tensor perturbed_logits(const ModelParams& params, const Direction& direction, double magnitude,
                        const Dataset& split) {
  const Tensor x = split.features_tensor();
  switch (direction.space) {
    case PerturbSpace::parameter: {
      std::vector<double> theta = flatten(params);
      if (direction.unit.size() != theta.size()) {
        throw ShapeError("parameter direction has " + std::to_string(direction.unit.size()) +
                         " entries, model has " + std::to_string(theta.size()));
      }
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] += magnitude * direction.unit[i];
      }
      ModelParams moved = params.deep_copy(false);
      assign_flat(moved, theta);
      return forward_logits(moved, x);
    }
    case PerturbSpace::feature: {
      const std::size_t dim = params.encoder.output_dim();
      if (direction.unit.size() != dim) {
        throw ShapeError("feature direction width " + std::to_string(direction.unit.size()) +
                         " != feature width " + std::to_string(dim));
      }
      std::vector<double> shift(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        shift[i] = magnitude * direction.unit[i];
      }
      return head_logits(params.head,
                         add(forward_features(params, x), Tensor::from_data({dim}, shift)));
    }
    case PerturbSpace::logit: {
      const std::size_t k = params.head.num_classes();
      if (direction.unit.size() != k) {
        throw ShapeError("logit direction width " + std::to_string(direction.unit.size()) +
                         " != class count " + std::to_string(k));
      }
      std::vector<double> shift(k);
      for (std::size_t i = 0; i < k; ++i) {
        shift[i] = magnitude * direction.unit[i];
      }
      return add(forward_logits(params, x), Tensor::from_data({k}, shift));
    }
    case PerturbSpace::function: {
      if (!direction.function) {
        throw ShapeError("function direction has no auxiliary network");
      }
      const auto& g = *direction.function;
      if (g.input_dim() != params.encoder.input_dim() ||
          g.output_dim() != params.head.num_classes()) {
        throw ShapeError("function direction maps " + std::to_string(g.input_dim()) + " -> " +
                         std::to_string(g.output_dim()) + ", model maps " +
                         std::to_string(params.encoder.input_dim()) + " -> " +
                         std::to_string(params.head.num_classes()));
      }
      const double c = direction.function_scale ? *direction.function_scale : function_norm(g, split);
      return add(forward_logits(params, x), scale(forward_encoder(g, x), magnitude / c));
    }
  }
  throw ShapeError("unknown perturbation space");
}

PerturbedMetrics perturbed_eval(const ModelParams& params, const Direction& direction,
                                double magnitude, const Dataset& split) {
  const auto m =
      metrics_from_logits(split.name, perturbed_logits(params, direction, magnitude, split),
                          split.labels);
  return {m.loss, m.accuracy};
}

// ---------------------------------------------------------------------------
// Perturbation study

const std::vector<double>& PerturbationSpec::magnitudes_for(PerturbSpace space) const {
  if (space == PerturbSpace::parameter && !parameter_magnitudes.empty()) {
    return parameter_magnitudes;
  }
  return magnitudes;
}

void PerturbationSpec::validate() const {
  if (spaces.empty()) {
    throw ConfigError("perturbation study needs at least one space");
  }
  if (n_directions == 0) {
    throw ConfigError("n_directions must be >= 1");
  }
  for (auto s : spaces) {
    const auto& mags = magnitudes_for(s);
    if (mags.empty()) {
      throw ConfigError("no magnitudes for space " + std::string(to_string(s)));
    }
    for (double m : mags) {
      if (!std::isfinite(m) || m < 0.0) {
        throw ConfigError("magnitudes must be finite and non-negative, got " + fmt(m));
      }
    }
  }
}

double PerturbationReport::mean_accuracy_drop(PerturbSpace space, const std::string& split) const {
  const auto base = std::find_if(baseline.begin(), baseline.end(),
                                 [&](const SplitMetrics& m) { return m.split == split; });
  if (base == baseline.end()) {
    throw ConfigError("no baseline for split '" + split + "'");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.space == space && r.split == split) {
      sum += r.accuracy;
      ++n;
    }
  }
  if (n == 0) {
    throw ConfigError("no records for space " + std::string(to_string(space)));
  }
  return base->accuracy - sum / static_cast<double>(n);
}

double PerturbationReport::mean_loss_increase(PerturbSpace space, const std::string& split) const {
  const auto base = std::find_if(baseline.begin(), baseline.end(),
                                 [&](const SplitMetrics& m) { return m.split == split; });
  if (base == baseline.end()) {
    throw ConfigError("no baseline for split '" + split + "'");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.space == space && r.split == split) {
      sum += r.loss;
      ++n;
    }
  }
  if (n == 0) {
    throw ConfigError("no records for space " + std::string(to_string(space)));
  }
  return sum / static_cast<double>(n) - base->loss;
}

PerturbationReport run_perturbation_study(const ModelParams& params, const PerturbationSpec& spec,
                                          std::span<const Dataset> splits) {
  spec.validate();
  if (splits.empty()) {
    throw ConfigError("perturbation study needs at least one split");
  }
  PerturbationReport report;
  for (const auto& s : splits) {
    report.baseline.push_back(evaluate(params, s));
  }
  const double theta_norm = [&] {
    double sq = 0.0;
    for (double v : flatten(params)) {
      sq += v * v;
    }
    return std::sqrt(sq);
  }();

  struct Job {
    PerturbSpace space;
    std::size_t direction;
  };
  std::vector<Job> jobs;
  for (auto s : spec.spaces) {
    for (std::size_t d = 0; d < spec.n_directions; ++d) {
      jobs.push_back({s, d});
    }
  }
  std::vector<std::vector<PerturbationRecord>> slots(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const auto [space, d] = jobs[j];
    const Direction dir = sample_unit_direction(space, params, derive_seed({spec.seed, d}));
    for (double m : spec.magnitudes_for(space)) {
      double step = m;
      if (space == PerturbSpace::parameter &&
          spec.parameter_scale == ParameterScale::relative_norm_pct) {
        step = m / 100.0 * theta_norm;
      }
      for (const auto& split : splits) {
        const auto r = perturbed_eval(params, dir, step, split);
        slots[j].push_back({space, d, m, split.name, r.loss, r.accuracy});
      }
    }
  });
  for (auto& s : slots) {
    report.records.insert(report.records.end(), s.begin(), s.end());
  }

  for (auto space : spec.spaces) {
    for (double m : spec.magnitudes_for(space)) {
      for (const auto& split : splits) {
        std::vector<double> losses;
        std::vector<double> accs;
        for (const auto& r : report.records) {
          if (r.space == space && r.magnitude == m && r.split == split.name) {
            losses.push_back(r.loss);
            accs.push_back(r.accuracy);
          }
        }
        report.aggregates.push_back({space, m, split.name, mean_of(losses), stddev_of(losses),
                                     mean_of(accs), stddev_of(accs), losses.size()});
      }
    }
  }
  return report;
}

void write_perturbation_csv(const PerturbationReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "space,direction,magnitude,split,loss,acc\n";
  for (const auto& r : report.records) {
    out << to_string(r.space) << ',' << r.direction << ',' << fmt(r.magnitude) << ',' << r.split
        << ',' << fmt(r.loss) << ',' << fmt(r.accuracy) << '\n';
  }
}

void write_perturbation_aggregate_csv(const PerturbationReport& report,
                                      const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "space,magnitude,split,loss_mean,loss_std,acc_mean,acc_std,n\n";
  for (const auto& a : report.aggregates) {
    out << to_string(a.space) << ',' << fmt(a.magnitude) << ',' << a.split << ','
        << fmt(a.loss_mean) << ',' << fmt(a.loss_std) << ',' << fmt(a.acc_mean) << ','
        << fmt(a.acc_std) << ',' << a.n << '\n';
  }
}

void write_perturbation_svgs(const PerturbationReport& report, const std::filesystem::path& stem) {
  // One line per space: the metric averaged over splits at each magnitude.
  std::vector<Series> loss_series;
  std::vector<Series> acc_series;
  std::map<std::size_t, std::map<double, std::pair<double, double>>> sums;
  std::map<std::size_t, std::map<double, std::size_t>> counts;
  for (const auto& a : report.aggregates) {
    auto& s = sums[space_index(a.space)][a.magnitude];
    s.first += a.loss_mean;
    s.second += a.acc_mean;
    ++counts[space_index(a.space)][a.magnitude];
  }
  for (const auto& [idx, by_mag] : sums) {
    const auto name = std::string(to_string(static_cast<PerturbSpace>(idx)));
    Series ls{name, {}, {}};
    Series as{name, {}, {}};
    for (const auto& [mag, s] : by_mag) {
      const double n = static_cast<double>(counts[idx][mag]);
      ls.x.push_back(mag);
      ls.y.push_back(s.first / n);
      as.x.push_back(mag);
      as.y.push_back(s.second / n);
    }
    loss_series.push_back(std::move(ls));
    acc_series.push_back(std::move(as));
  }
  auto base = stem;
  write_line_chart(base.string() + "_loss.svg", "Loss under perturbation", "magnitude",
                   "mean loss", loss_series);
  write_line_chart(base.string() + "_acc.svg", "Accuracy under perturbation", "magnitude",
                   "mean accuracy", acc_series);
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationVariant> ablation_variants() {
  return {{"FT", RegMethod::none},
          {"FT+FAR", RegMethod::far},
          {"FT+FCR", RegMethod::fcr},
          {"FT+FAR+FCR", RegMethod::far_fcr}};
}

double function_distance(const ModelParams& a, const ModelParams& b, const Dataset& split,
                         OutputSpace space) {
  const Tensor x = split.features_tensor();
  return mean_squared_l2(model_output(a, x, space), model_output(b, x, space)).item();
}

AblationResult run_ablation(const AblationInputs& inputs, const TrainConfig& base_cfg,
                            std::span<const std::uint64_t> seeds,
                            std::span<const AblationVariant> variants) {
  if (inputs.splits == nullptr || inputs.pretrained == nullptr) {
    throw ConfigError("ablation needs splits and a pretrained model");
  }
  if (seeds.empty()) {
    throw ConfigError("ablation needs at least one seed");
  }
  std::vector<AblationVariant> vars(variants.begin(), variants.end());
  if (vars.empty()) {
    vars = ablation_variants();
  }
  const auto& splits = *inputs.splits;
  const ModelParams start =
      finetune_start(*inputs.pretrained, inputs.task_classes, inputs.train_head);
  const bool with_heldout = splits.heldout.has_value() && !inputs.heldout_classes.empty();

  AblationResult result;
  result.pretrained = evaluate_all(start, splits.id_test, splits.ood_tests);
  if (with_heldout) {
    result.pretrained_heldout_acc =
        zero_shot_transfer_eval(inputs.pretrained->head.prototypes, inputs.pretrained->encoder,
                                *splits.heldout, inputs.heldout_classes, inputs.task_classes)
            .accuracy;
  }

  result.runs.resize(vars.size() * seeds.size());
  parallel_for(result.runs.size(), [&](std::size_t j) {
    const auto& var = vars[j / seeds.size()];
    const std::uint64_t seed = seeds[j % seeds.size()];
    TrainConfig cfg = base_cfg;
    cfg.seed = seed;
    cfg.regularizer.method = var.method;
    ModelState m(start.deep_copy(true));
    finetune(m, splits.id_train, cfg);
    AblationRun run;
    run.variant = var.name;
    run.seed = seed;
    run.report = evaluate_all(m.live(), splits.id_test, splits.ood_tests);
    if (with_heldout) {
      run.heldout_acc =
          zero_shot_transfer_eval(inputs.pretrained->head.prototypes, m.live().encoder,
                                  *splits.heldout, inputs.heldout_classes, inputs.task_classes)
              .accuracy;
    }
    run.function_distance = function_distance(m.live(), start, splits.id_test);
    run.params = m.live().deep_copy(false);
    result.runs[j] = std::move(run);
  });

  const double pre_id = result.pretrained.at(splits.id_test.name).accuracy;
  const double pre_ood = result.pretrained.ood_avg;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    std::vector<double> id;
    std::vector<double> ood;
    std::vector<double> held;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& run = result.runs[v * seeds.size() + s];
      id.push_back(run.report.at(splits.id_test.name).accuracy);
      ood.push_back(run.report.ood_avg);
      if (run.heldout_acc) {
        held.push_back(*run.heldout_acc);
      }
    }
    AblationRow row;
    row.variant = vars[v].name;
    row.id_mean = mean_of(id);
    row.id_std = stddev_of(id);
    row.ood_mean = mean_of(ood);
    row.ood_std = stddev_of(ood);
    row.id_gain = 100.0 * (row.id_mean - pre_id);
    row.ood_gain = 100.0 * (row.ood_mean - pre_ood);
    if (!held.empty()) {
      row.heldout_mean = mean_of(held);
      row.heldout_std = stddev_of(held);
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

void write_ablation_csv(const AblationResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  out << "variant,id_mean,id_std,ood_mean,ood_std,id_gain,ood_gain,heldout_mean,heldout_std\n";
  for (const auto& r : result.rows) {
    out << r.variant << ',' << fmt(r.id_mean) << ',' << fmt(r.id_std) << ',' << fmt(r.ood_mean)
        << ',' << fmt(r.ood_std) << ',' << fmt(r.id_gain) << ',' << fmt(r.ood_gain) << ','
        << opt(r.heldout_mean) << ',' << opt(r.heldout_std) << '\n';
  }
}

void write_ablation_runs_csv(const AblationResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "variant,seed,split,acc,loss,recall_macro,f1_macro,n\n";
  auto line = [&](const std::string& variant, const std::string& seed, const SplitMetrics& m) {
    out << variant << ',' << seed << ',' << m.split << ',' << fmt(m.accuracy) << ','
        << fmt(m.loss) << ',' << fmt(m.recall_macro) << ',' << fmt(m.f1_macro) << ',' << m.n
        << '\n';
  };
  for (const auto& m : result.pretrained.splits) {
    line("pretrained", "", m);
  }
  for (const auto& run : result.runs) {
    for (const auto& m : run.report.splits) {
      line(run.variant, std::to_string(run.seed), m);
    }
  }
}

// ---------------------------------------------------------------------------
// Interpolation

std::vector<InterpolationPoint> run_interpolation_sweep(const ModelParams& theta0,
                                                        const ModelParams& theta_ft,
                                                        std::span<const double> alphas,
                                                        std::span<const Dataset> splits) {
  require_same_shapes(theta0, theta_ft);
  std::vector<InterpolationPoint> curve(alphas.size() * splits.size());
  parallel_for(alphas.size(), [&](std::size_t a) {
    const ModelParams p = interpolate_weights(theta0, theta_ft, alphas[a]);
    for (std::size_t s = 0; s < splits.size(); ++s) {
      curve[a * splits.size() + s] = {alphas[a], evaluate(p, splits[s])};
    }
  });
  return curve;
}

std::vector<double> parse_alpha_range(std::string_view text) {
  double parts[3];
  std::size_t begin = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t end = i < 2 ? text.find(':', begin) : text.size();
    if (end == std::string_view::npos) {
      throw ConfigError("alpha range must be start:end:step, got '" + std::string(text) + "'");
    }
    const auto field = text.substr(begin, end - begin);
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), parts[i]);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
      throw ConfigError("bad number '" + std::string(field) + "' in alpha range");
    }
    begin = end + 1;
  }
  const auto [start, stop, step] = parts;
  if (!(step > 0.0) || stop < start) {
    throw ConfigError("alpha range needs step > 0 and end >= start");
  }
  if (start < 0.0 || stop > 1.0) {
    throw ConfigError("alpha values must lie in [0, 1]");
  }
  const auto count = static_cast<std::size_t>(std::llround((stop - start) / step)) + 1;
  if (std::abs(start + static_cast<double>(count - 1) * step - stop) > 1e-9 * std::max(1.0, step)) {
    throw ConfigError("alpha range end is not reached by whole steps");
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = start + static_cast<double>(i) * step;
  }
  out.back() = stop;
  return out;
}

void write_interpolation_csv(std::span<const InterpolationPoint> curve,
                             const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "alpha,split,acc,loss,recall_macro,f1_macro\n";
  for (const auto& p : curve) {
    out << fmt(p.alpha) << ',' << p.metrics.split << ',' << fmt(p.metrics.accuracy) << ','
        << fmt(p.metrics.loss) << ',' << fmt(p.metrics.recall_macro) << ','
        << fmt(p.metrics.f1_macro) << '\n';
  }
}

void write_interpolation_svg(std::span<const InterpolationPoint> curve,
                             const std::filesystem::path& path) {
  std::vector<Series> series;
  for (const auto& p : curve) {
    auto it = std::find_if(series.begin(), series.end(),
                           [&](const Series& s) { return s.name == p.metrics.split; });
    if (it == series.end()) {
      series.push_back({p.metrics.split, {}, {}});
      it = series.end() - 1;
    }
    it->x.push_back(p.alpha);
    it->y.push_back(p.metrics.accuracy);
  }
  write_line_chart(path, "Weight interpolation", "alpha", "accuracy", series);
}

double mean_of(std::span<const double> values) {
  if (values.empty()) {
    return 0.0;
  }
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double stddev_of(std::span<const double> values) {
  if (values.size() < 2) {
    return 0.0;
  }
  const double mu = mean_of(values);
  double sq = 0.0;
  for (double v : values) {
    sq += (v - mu) * (v - mu);
  }
  return std::sqrt(sq / static_cast<double>(values.size() - 1));
}

}  // namespace funcreg
