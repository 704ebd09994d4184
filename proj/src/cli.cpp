#include "funcreg/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "funcreg/analysis.hpp"
#include "funcreg/config.hpp"
#include "funcreg/error.hpp"
#include "funcreg/parallel.hpp"

namespace funcreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Log {
 public:
  Log(std::ostream& err, const bool& quiet) : err_(err), quiet_(quiet) {}

  void info(const std::string& msg) const {
    if (!quiet_) {
      err_ << "[funcreg] " << msg << '\n';
    }
  }
  void warn(const std::string& msg) const { err_ << "[funcreg] warning: " << msg << '\n'; }

 private:
  std::ostream& err_;
  const bool& quiet_;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string run_id(const std::string& command, const std::string& hash, std::uint64_t seed) {
  return command + "-" + hash.substr(0, 8) + "-s" + std::to_string(seed);
}

std::vector<Dataset> eval_splits(const BenchmarkSplits& s) {
  std::vector<Dataset> out{s.id_test};
  out.insert(out.end(), s.ood_tests.begin(), s.ood_tests.end());
  return out;
}

/// Rows of the checkpoint head holding the given global classes.
std::vector<int> head_rows(const Checkpoint& ckpt, std::span<const int> classes) {
  std::vector<int> stored = ckpt.meta.classes;
  if (stored.empty()) {
    for (std::size_t k = 0; k < ckpt.params.head.num_classes(); ++k) {
      stored.push_back(static_cast<int>(k));
    }
  }
  std::vector<int> rows;
  for (int c : classes) {
    const auto it = std::find(stored.begin(), stored.end(), c);
    if (it == stored.end()) {
      throw ShapeError("checkpoint has no head row for class " + std::to_string(c));
    }
    rows.push_back(static_cast<int>(it - stored.begin()));
  }
  return rows;
}

/// Checkpoint parameters restricted to `classes`, in that order.
ModelParams restrict_head(const Checkpoint& ckpt, std::span<const int> classes) {
  const auto rows = head_rows(ckpt, classes);
  ModelParams p = ckpt.params.deep_copy(false);
  p.head.prototypes = select_rows(ckpt.params.head.prototypes, rows);
  return p;
}

std::vector<std::string> as_strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) {
    out.push_back(p.string());
  }
  return out;
}

void write_metrics(const MetricsReport& report, const std::string& id_split, const fs::path& dir,
                   std::vector<fs::path>& outputs) {
  write_report_csv(report, dir / "metrics.csv");
  std::ofstream out(dir / "metrics.json", std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + (dir / "metrics.json").string());
  }
  out << json{{"id_split", id_split}, {"report", to_json(report)}}.dump(2) << '\n';
  outputs.push_back(dir / "metrics.csv");
  outputs.push_back(dir / "metrics.json");
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::string spec;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const ShiftBenchmark spec = benchmark_from_json(read_json_file(a.spec));
  log.info("generating benchmark (seed " + std::to_string(spec.seed) + ")");
  const auto splits = generate_benchmark(spec);
  const auto written = save_benchmark_dir(spec, splits, a.out);
  RunManifest m;
  m.command = "gen-data";
  m.config_hash = config_hash(to_json(spec));
  m.run_id = run_id(m.command, m.config_hash, spec.seed);
  m.seed = spec.seed;
  m.inputs = {a.spec};
  m.outputs = as_strings(written);
  m.wall_clock_s = seconds_since(t0);
  write_manifest(m, fs::path(a.out) / "manifest.json");
  log.info("wrote " + std::to_string(written.size()) + " files to " + a.out);
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string pretrained;
  std::string out;
};

RunConfig config_or_default(const std::string& path, Phase phase) {
  return path.empty() ? default_run_config(phase) : load_run_config(path, phase);
}

void cmd_pretrain(const TrainArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const RunConfig cfg = config_or_default(a.config, Phase::pretrain);
  const auto data = load_benchmark_dir(a.data);
  const auto& train = data.splits.pretrain;
  fs::create_directories(a.out);
  ModelState m(init_params(make_arch(cfg.model, train.dim, data.spec.num_classes),
                           cfg.model.init_seed));
  log.info("pretraining on " + std::to_string(train.size()) + " examples, " +
           std::to_string(cfg.train.epochs) + " epochs");
  const std::vector<Dataset> evals{data.splits.pretrain_test};
  const RunLog run = pretrain(m, train, cfg.train, evals);

  std::vector<fs::path> outputs;
  CheckpointMeta meta;
  for (std::size_t k = 0; k < data.spec.num_classes; ++k) {
    meta.classes.push_back(static_cast<int>(k));
  }
  const fs::path stem = fs::path(a.out) / "model";
  save_checkpoint(m.live(), stem, meta);
  outputs.push_back(checkpoint_manifest_path(stem));
  outputs.push_back(checkpoint_payload_path(stem));
  run.write_steps_csv(fs::path(a.out) / "steps.csv");
  run.write_evals_csv(fs::path(a.out) / "evals.csv");
  outputs.push_back(fs::path(a.out) / "steps.csv");
  outputs.push_back(fs::path(a.out) / "evals.csv");
  const auto report = make_report({evaluate(m.live(), data.splits.pretrain_test)}, {});
  write_metrics(report, "pretrain_test", a.out, outputs);
  log.info("pretrain_test accuracy " + std::to_string(report.splits.front().accuracy));

  RunManifest man;
  man.command = "pretrain";
  man.config_hash = config_hash(to_json(cfg));
  man.seed = cfg.train.seed;
  man.run_id = run_id(man.command, man.config_hash, man.seed);
  man.inputs = {a.config, a.data};
  man.outputs = as_strings(outputs);
  man.wall_clock_s = seconds_since(t0);
  man.extra = {{"method", "pretrain"}};
  write_manifest(man, fs::path(a.out) / "run_manifest.json");
}

void cmd_finetune(const TrainArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const RunConfig cfg = config_or_default(a.config, Phase::finetune);
  for (const auto& w : cfg.train.regularizer.warnings()) {
    log.warn(w);
  }
  const auto data = load_benchmark_dir(a.data);
  const Checkpoint pre = load_checkpoint(a.pretrained);
  const auto task = data.spec.task_classes();
  ModelParams start = restrict_head(pre, task).deep_copy(true);
  start.head.trainable = cfg.model.train_head;
  start.head.prototypes = start.head.prototypes.clone(cfg.model.train_head);
  fs::create_directories(a.out);

  ModelState m(std::move(start));
  const auto evals = eval_splits(data.splits);
  log.info("fine-tuning (" + std::string(to_string(cfg.train.regularizer.method)) + ") on " +
           std::to_string(data.splits.id_train.size()) + " examples");
  const RunLog run = finetune(m, data.splits.id_train, cfg.train, evals);

  std::vector<fs::path> outputs;
  const fs::path stem = fs::path(a.out) / "model";
  save_checkpoint(m.live(), stem, CheckpointMeta{task});
  outputs.push_back(checkpoint_manifest_path(stem));
  outputs.push_back(checkpoint_payload_path(stem));
  run.write_steps_csv(fs::path(a.out) / "steps.csv");
  run.write_evals_csv(fs::path(a.out) / "evals.csv");
  outputs.push_back(fs::path(a.out) / "steps.csv");
  outputs.push_back(fs::path(a.out) / "evals.csv");

  MetricsReport report = evaluate_all(m.live(), data.splits.id_test, data.splits.ood_tests);
  const auto held = data.spec.heldout_classes();
  if (data.splits.heldout && !held.empty()) {
    std::vector<int> all(data.spec.num_classes);
    for (std::size_t k = 0; k < all.size(); ++k) {
      all[k] = static_cast<int>(k);
    }
    const ModelParams pre_all = restrict_head(pre, all);
    auto zs = zero_shot_transfer_eval(pre_all.head.prototypes, m.live().encoder,
                                      *data.splits.heldout, held, task);
    zs.split = "heldout_zero_shot";
    report.splits.push_back(zs);
  }
  write_metrics(report, data.splits.id_test.name, a.out, outputs);
  log.info("id accuracy " + std::to_string(report.at(data.splits.id_test.name).accuracy) +
           ", ood average " + std::to_string(report.ood_avg));

  RunManifest man;
  man.command = "finetune";
  man.config_hash = config_hash(to_json(cfg));
  man.seed = cfg.train.seed;
  man.run_id = run_id(man.command, man.config_hash, man.seed);
  man.inputs = {a.config, a.data, a.pretrained};
  man.outputs = as_strings(outputs);
  man.wall_clock_s = seconds_since(t0);
  man.extra = {{"method", to_string(cfg.train.regularizer.method)}};
  write_manifest(man, fs::path(a.out) / "run_manifest.json");
}

struct PerturbArgs {
  std::string model;
  std::string spec;
  std::string data;
  std::string out;
};

PerturbationSpec perturbation_spec_from_json(const json& j) {
  if (!j.is_object()) {
    throw ConfigError("perturbation spec must be a JSON object");
  }
  static const std::vector<std::string> keys{"spaces",           "n_directions", "magnitudes",
                                             "parameter_magnitudes", "parameter_scale", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown key '" + key + "' in perturbation spec");
    }
  }
  PerturbationSpec s;
  try {
    if (j.contains("spaces")) {
      s.spaces.clear();
      for (const auto& name : j.at("spaces")) {
        s.spaces.push_back(perturb_space_from_string(name.get<std::string>()));
      }
    }
    s.n_directions = j.value("n_directions", s.n_directions);
    s.magnitudes = j.value("magnitudes", s.magnitudes);
    s.parameter_magnitudes = j.value("parameter_magnitudes", s.parameter_magnitudes);
    const auto scale = j.value("parameter_scale", std::string("absolute"));
    if (scale == "absolute") {
      s.parameter_scale = ParameterScale::absolute;
    } else if (scale == "relative_norm_pct") {
      s.parameter_scale = ParameterScale::relative_norm_pct;
    } else {
      throw ConfigError("unknown parameter_scale '" + scale + "'");
    }
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("perturbation spec: ") + e.what());
  }
  s.validate();
  return s;
}

void cmd_perturb(const PerturbArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const PerturbationSpec spec =
      a.spec.empty() ? PerturbationSpec{} : perturbation_spec_from_json(read_json_file(a.spec));
  const auto data = load_benchmark_dir(a.data);
  const Checkpoint ckpt = load_checkpoint(a.model);
  const ModelParams model = restrict_head(ckpt, data.spec.task_classes());
  fs::create_directories(a.out);
  const auto splits = eval_splits(data.splits);
  log.info("perturbation study: " + std::to_string(spec.spaces.size()) + " spaces x " +
           std::to_string(spec.n_directions) + " directions");
  const auto report = run_perturbation_study(model, spec, splits);
  const fs::path dir(a.out);
  write_perturbation_csv(report, dir / "perturbation.csv");
  write_perturbation_aggregate_csv(report, dir / "perturbation_aggregate.csv");
  write_perturbation_svgs(report, dir / "perturbation");
  for (const auto& s : splits) {
    std::string line = s.name + ":";
    for (auto space : spec.spaces) {
      line += " " + std::string(to_string(space)) + " drop " +
              std::to_string(report.mean_accuracy_drop(space, s.name));
    }
    log.info(line);
  }
  RunManifest man;
  man.command = "perturb";
  json spec_json = {{"seed", spec.seed}, {"n_directions", spec.n_directions},
                    {"magnitudes", spec.magnitudes},
                    {"parameter_magnitudes", spec.parameter_magnitudes}};
  man.config_hash = config_hash(spec_json);
  man.seed = spec.seed;
  man.run_id = run_id(man.command, man.config_hash, man.seed);
  man.inputs = {a.model, a.spec, a.data};
  man.outputs = {(dir / "perturbation.csv").string(), (dir / "perturbation_aggregate.csv").string(),
                 (dir / "perturbation_loss.svg").string(), (dir / "perturbation_acc.svg").string()};
  man.wall_clock_s = seconds_since(t0);
  write_manifest(man, dir / "run_manifest.json");
}

struct AblateArgs {
  std::string config;
  std::string seeds = "1,2,3,4,5";
  std::string data;
  std::string pretrained;
  std::string out;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t begin = 0;
  while (begin <= text.size()) {
    const std::size_t end = std::min(text.find(',', begin), text.size());
    const std::string field = text.substr(begin, end - begin);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (field.empty() || ec != std::errc() || ptr != field.data() + field.size()) {
      throw ConfigError("bad seed '" + field + "' in --seeds");
    }
    out.push_back(v);
    begin = end + 1;
  }
  return out;
}

void cmd_ablate(const AblateArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const RunConfig cfg = config_or_default(a.config, Phase::finetune);
  const auto seeds = parse_seeds(a.seeds);
  LoadedBenchmark data;
  if (a.data.empty()) {
    data.spec = cfg.data;
    data.splits = generate_benchmark(cfg.data);
  } else {
    data = load_benchmark_dir(a.data);
  }
  ModelParams pretrained;
  if (a.pretrained.empty()) {
    log.info("no --pretrained checkpoint; pretraining with the default recipe");
    ModelState m(init_params(
        make_arch(cfg.model, data.splits.pretrain.dim, data.spec.num_classes), cfg.model.init_seed));
    pretrain(m, data.splits.pretrain, default_pretrain_config());
    pretrained = m.live().deep_copy(false);
  } else {
    const Checkpoint ckpt = load_checkpoint(a.pretrained);
    std::vector<int> all(data.spec.num_classes);
    for (std::size_t k = 0; k < all.size(); ++k) {
      all[k] = static_cast<int>(k);
    }
    pretrained = restrict_head(ckpt, all);
  }
  AblationInputs in;
  in.splits = &data.splits;
  in.pretrained = &pretrained;
  in.task_classes = data.spec.task_classes();
  in.heldout_classes = data.spec.heldout_classes();
  in.train_head = cfg.model.train_head;
  log.info("ablation: 4 variants x " + std::to_string(seeds.size()) + " seeds on " +
           std::to_string(worker_count()) + " workers");
  const auto result = run_ablation(in, cfg.train, seeds);

  fs::create_directories(a.out);
  const fs::path dir(a.out);
  write_ablation_csv(result, dir / "ablation.csv");
  write_ablation_runs_csv(result, dir / "ablation_runs.csv");
  for (const auto& r : result.rows) {
    log.info(r.variant + ": id " + std::to_string(r.id_mean) + ", ood " +
             std::to_string(r.ood_mean));
  }
  RunManifest man;
  man.command = "ablate";
  man.config_hash = config_hash(to_json(cfg));
  man.seed = seeds.front();
  man.run_id = run_id(man.command, man.config_hash, man.seed);
  man.inputs = {a.config, a.data, a.pretrained};
  man.outputs = {(dir / "ablation.csv").string(), (dir / "ablation_runs.csv").string()};
  man.wall_clock_s = seconds_since(t0);
  man.extra = {{"seeds", seeds}};
  write_manifest(man, dir / "run_manifest.json");
}

struct InterpolateArgs {
  std::string pretrained;
  std::string finetuned;
  std::string alphas = "0:1:0.1";
  std::string data;
  std::string out;
};

void cmd_interpolate(const InterpolateArgs& a, const Log& log) {
  const auto t0 = Clock::now();
  const auto alphas = parse_alpha_range(a.alphas);
  const auto data = load_benchmark_dir(a.data);
  const Checkpoint ft = load_checkpoint(a.finetuned);
  const auto task = data.spec.task_classes();
  const ModelParams theta_ft = restrict_head(ft, task);
  const ModelParams theta0 = restrict_head(load_checkpoint(a.pretrained), task);
  const auto splits = eval_splits(data.splits);
  log.info("interpolating over " + std::to_string(alphas.size()) + " alphas");
  const auto curve = run_interpolation_sweep(theta0, theta_ft, alphas, splits);
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  write_interpolation_csv(curve, dir / "interpolation.csv");
  write_interpolation_svg(curve, dir / "interpolation.svg");
  RunManifest man;
  man.command = "interpolate";
  man.config_hash = config_hash(json{{"alphas", alphas}});
  man.run_id = run_id(man.command, man.config_hash, 0);
  man.inputs = {a.pretrained, a.finetuned, a.data};
  man.outputs = {(dir / "interpolation.csv").string(), (dir / "interpolation.svg").string()};
  man.wall_clock_s = seconds_since(t0);
  write_manifest(man, dir / "run_manifest.json");
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

void cmd_report(const ReportArgs& a, std::ostream& stdout_stream, const Log& log) {
  std::vector<std::string> missing;
  for (const auto& r : a.runs) {
    if (!fs::exists(fs::path(r) / "metrics.json")) {
      missing.push_back(r);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) {
      list += (list.empty() ? "" : ", ") + m;
    }
    throw ConfigError("run directories without metrics.json: " + list);
  }
  std::ostringstream table;
  table << "run,method,seed,id_acc,ood_avg\n";
  for (const auto& r : a.runs) {
    const json metrics = read_json_file(fs::path(r) / "metrics.json");
    const MetricsReport report = report_from_json(metrics.at("report"));
    const std::string id_split = metrics.value("id_split", std::string("id_test"));
    std::string method;
    std::string seed;
    if (fs::exists(fs::path(r) / "run_manifest.json")) {
      const json man = read_json_file(fs::path(r) / "run_manifest.json");
      method = man.value("extra", json::object()).value("method", std::string());
      seed = std::to_string(man.value("seed", std::uint64_t{0}));
    }
    char buf[64];
    table << fs::path(r).filename().string() << ',' << method << ',' << seed << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", report.at(id_split).accuracy, report.ood_avg);
    table << buf << '\n';
  }
  if (a.out == "-") {
    stdout_stream << table.str();
  } else {
    std::ofstream out(a.out, std::ios::trunc);
    if (!out) {
      throw Error("cannot write " + a.out);
    }
    out << table.str();
    log.info("wrote " + a.out);
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Functional-regularization fine-tuning on a synthetic covariate-shift benchmark",
               "funcreg"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress lines");
  app.fallthrough();
  const Log log(err, quiet);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the benchmark splits as CSV files");
  c_gen->add_option("--spec", gen.spec, "Benchmark spec JSON")->required();
  c_gen->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Pretrain the encoder and prototype head");
  c_pre->add_option("--config", pre.config, "Run config JSON (defaults when omitted)");
  c_pre->add_option("--data", pre.data, "Directory written by gen-data")->required();
  c_pre->add_option("--out", pre.out, "Output directory")->required();

  TrainArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint");
  c_ft->add_option("--config", ft.config, "Run config JSON (defaults when omitted)");
  c_ft->add_option("--data", ft.data, "Directory written by gen-data")->required();
  c_ft->add_option("--pretrained", ft.pretrained, "Pretrained checkpoint")->required();
  c_ft->add_option("--out", ft.out, "Output directory")->required();

  PerturbArgs per;
  auto* c_per = app.add_subcommand("perturb", "Perturbation robustness study");
  c_per->add_option("--model", per.model, "Checkpoint to perturb")->required();
  c_per->add_option("--spec", per.spec, "Perturbation spec JSON (defaults when omitted)");
  c_per->add_option("--data", per.data, "Directory written by gen-data")->required();
  c_per->add_option("--out", per.out, "Output directory")->required();

  AblateArgs abl;
  auto* c_abl = app.add_subcommand("ablate", "FT / FAR / FCR / FAR+FCR ablation over seeds");
  c_abl->add_option("--config", abl.config, "Run config JSON (defaults when omitted)");
  c_abl->add_option("--seeds", abl.seeds, "Comma-separated seeds")->capture_default_str();
  c_abl->add_option("--data", abl.data, "Directory written by gen-data (else generated)");
  c_abl->add_option("--pretrained", abl.pretrained, "Pretrained checkpoint (else pretrained)");
  c_abl->add_option("--out", abl.out, "Output directory")->required();

  InterpolateArgs interp;
  auto* c_int = app.add_subcommand("interpolate", "Weight interpolation sweep");
  c_int->add_option("--pretrained", interp.pretrained, "Pretrained checkpoint")->required();
  c_int->add_option("--finetuned", interp.finetuned, "Fine-tuned checkpoint")->required();
  c_int->add_option("--alphas", interp.alphas, "start:end:step")->capture_default_str();
  c_int->add_option("--data", interp.data, "Directory written by gen-data")->required();
  c_int->add_option("--out", interp.out, "Output directory")->required();

  ReportArgs rep;
  auto* c_rep = app.add_subcommand("report", "Consolidated comparison table");
  c_rep->add_option("--runs", rep.runs, "Run directories")->required()->expected(1, -1);
  c_rep->add_option("--out", rep.out, "Output CSV, or - for standard output")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_gen->parsed()) {
      cmd_gen_data(gen, log);
    } else if (c_pre->parsed()) {
      cmd_pretrain(pre, log);
    } else if (c_ft->parsed()) {
      cmd_finetune(ft, log);
    } else if (c_per->parsed()) {
      cmd_perturb(per, log);
    } else if (c_abl->parsed()) {
      cmd_ablate(abl, log);
    } else if (c_int->parsed()) {
      cmd_interpolate(interp, log);
    } else if (c_rep->parsed()) {
      cmd_report(rep, out, log);
    }
  } catch (const ConfigError& e) {
    err << "funcreg: config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "funcreg: numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ParseError& e) {
    err << "funcreg: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    err << "funcreg: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "funcreg: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace funcreg
