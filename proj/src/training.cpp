#include "funcreg/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "funcreg/error.hpp"
#include "funcreg/rng.hpp"

namespace funcreg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) {
    throw ConfigError("peak_lr must be positive");
  }
  if (batch_size == 0) {
    throw ConfigError("batch_size must be >= 1");
  }
  if (!(weight_decay >= 0.0)) {
    throw ConfigError("weight_decay must be >= 0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) {
    throw ConfigError("eps must be positive");
  }
  regularizer.validate();
  augment.validate();
}

namespace {

void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed,
                    std::string_view where) {
  if (!j.is_object()) {
    throw ConfigError(std::string(where) + " must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

}  // namespace

json to_json(const AugmentPolicy& policy) {
  json ops = json::array();
  for (auto k : policy.ops) {
    ops.push_back(std::string(to_string(k)));
  }
  return {{"n_ops", policy.n_ops},
          {"magnitude", policy.magnitude},
          {"ops", ops},
          {"seed", policy.seed}};
}

AugmentPolicy augment_from_json(const json& j, const AugmentPolicy& base) {
  reject_unknown(j, {"n_ops", "magnitude", "ops", "seed"}, "augment");
  AugmentPolicy p = base;
  try {
    p.n_ops = j.value("n_ops", p.n_ops);
    p.magnitude = j.value("magnitude", p.magnitude);
    p.seed = j.value("seed", p.seed);
    if (j.contains("ops")) {
      p.ops.clear();
      for (const auto& name : j.at("ops")) {
        p.ops.push_back(augment_kind_from_string(name.get<std::string>()));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("augment: ") + e.what());
  }
  p.validate();
  return p;
}

json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"peak_lr", cfg.peak_lr},
          {"warmup_steps", cfg.warmup_steps},
          {"schedule", cfg.schedule == Schedule::cosine ? "cosine" : "constant"},
          {"weight_decay", cfg.weight_decay},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"eps", cfg.eps},
          {"seed", cfg.seed},
          {"eval_every", cfg.eval_every}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
  reject_unknown(j,
                 {"epochs", "batch_size", "peak_lr", "warmup_steps", "schedule", "weight_decay",
                  "beta1", "beta2", "eps", "seed", "eval_every"},
                 "train");
  TrainConfig c = base;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    const auto schedule =
        j.value("schedule", std::string(c.schedule == Schedule::cosine ? "cosine" : "constant"));
    if (schedule == "cosine") {
      c.schedule = Schedule::cosine;
    } else if (schedule == "constant") {
      c.schedule = Schedule::constant;
    } else {
      throw ConfigError("unknown schedule '" + schedule + "'");
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  return c;
}

TrainConfig default_pretrain_config() {
  TrainConfig c;
  c.epochs = 12;
  c.batch_size = 64;
  c.peak_lr = 3e-3;
  c.warmup_steps = 50;
  c.weight_decay = 0.01;
  c.seed = 11;
  return c;
}

TrainConfig default_finetune_config() {
  TrainConfig c;
  c.regularizer.method = RegMethod::far_fcr;
  return c;
}

ModelArch default_arch(std::size_t num_classes) {
  ModelArch a;
  a.num_classes = num_classes;
  return a;
}

ModelParams finetune_start(const ModelParams& pretrained, std::span<const int> classes,
                           bool train_head) {
  ModelParams out = pretrained.deep_copy(true);
  out.head.trainable = train_head;
  out.head.prototypes = select_rows(pretrained.head.prototypes, classes).clone(train_head);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

void optimizer_step(std::span<NamedTensor> params, AdamState& state, double lr, double wd,
                    double beta1, double beta2, double eps) {
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.tensor.size(), 0.0);
      state.second.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) {
    throw ShapeError("optimizer state does not match the parameter list");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (state.first[t].size() != params[t].tensor.size()) {
      throw ShapeError("optimizer state shape mismatch for " + params[t].name);
    }
    if (params[t].tensor.has_grad()) {
      for (double g : params[t].tensor.grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in parameter " + params[t].name);
        }
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto theta = params[t].tensor.mutable_data();
    const bool has_grad = params[t].tensor.has_grad();
    std::span<const double> grad = has_grad ? params[t].tensor.grad() : std::span<const double>{};
    auto& m = state.first[t];
    auto& v = state.second[t];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] = theta[i] - lr * m_hat / (std::sqrt(v_hat) + eps) - lr * wd * theta[i];
    }
  }
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  const auto s = static_cast<double>(step);
  const auto warm = static_cast<double>(cfg.warmup_steps);
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * s / warm;
  }
  if (cfg.schedule == Schedule::constant || total_steps <= cfg.warmup_steps) {
    return cfg.peak_lr;
  }
  const double progress =
      std::min(1.0, (s - warm) / (static_cast<double>(total_steps) - warm));
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// RunLog

void RunLog::add_step(StepRecord record) {
  if (!steps_.empty() && record.step <= steps_.back().step) {
    throw StateError("run log steps must be strictly increasing");
  }
  steps_.push_back(std::move(record));
}

void RunLog::add_eval(std::size_t step, SplitMetrics metrics) {
  if (!evals_.empty() && step < evals_.back().step) {
    throw StateError("run log eval steps must not decrease");
  }
  evals_.push_back({step, std::move(metrics)});
}

namespace {

std::string cell(const std::optional<double>& v) {
  if (!v) {
    return "";
  }
  return format_double(*v);
}

}  // namespace

void RunLog::write_steps_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << "step,lr,loss_ce,loss_far,loss_fcr,loss_reg,grad_norm\n";
  for (const auto& s : steps_) {
    out << s.step << ',' << format_double(s.lr) << ',' << format_double(s.loss_ce) << ','
        << cell(s.loss_far) << ',' << cell(s.loss_fcr) << ',' << cell(s.loss_reg) << ','
        << format_double(s.grad_norm) << '\n';
  }
}

void RunLog::write_evals_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << "step,split,acc,loss,recall_macro,f1_macro\n";
  for (const auto& e : evals_) {
    const auto& m = e.metrics;
    out << e.step << ',' << m.split << ',' << format_double(m.accuracy) << ','
        << format_double(m.loss) << ',' << format_double(m.recall_macro) << ','
        << format_double(m.f1_macro) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Loops

std::uint64_t step_seed(const TrainConfig& cfg, std::size_t step) {
  return derive_seed({cfg.seed, step, 0xA06});
}

std::vector<NamedTensor> trainable_parameters(ModelParams& params) {
  std::vector<NamedTensor> out;
  for (auto& nt : params.named_tensors()) {
    if (nt.name == "head.prototypes" && !params.head.trainable) {
      continue;
    }
    out.push_back(std::move(nt));
  }
  return out;
}

namespace {

void evaluate_into(RunLog& log, std::size_t step, const ModelParams& params,
                   std::span<const Dataset> splits) {
  for (const auto& d : splits) {
    log.add_eval(step, evaluate(params, d));
  }
}

RunLog train_loop(ModelState& m, const Dataset& train, const TrainConfig& cfg,
                  std::span<const Dataset> eval_splits, const StepObserver& observer,
                  bool regularized) {
  cfg.validate();
  RunLog log;
  if (cfg.epochs == 0) {
    return log;
  }
  if (train.empty()) {
    throw StateError("training split '" + train.name + "' is empty");
  }
  const RegularizerConfig reg =
      regularized ? cfg.regularizer : RegularizerConfig{};  // pretraining is plain CE
  if (regularized) {
    m.take_snapshot();
    if (reg.method == RegMethod::ema_distill) {
      m.init_ema();
    }
  }
  RegularizerInputs inputs;
  if (reg.method == RegMethod::car) {
    inputs.context_prototypes = make_context_prototypes(
        reg.car_contexts, m.live().encoder.output_dim(), derive_seed({cfg.seed, 0xCA7}));
  }

  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const Batch& batch : batches(train, cfg.batch_size, cfg.seed, epoch)) {
      const double lr = lr_at(step, total_steps, cfg);
      Tensor x_aug;
      if (reg.uses_augmentation()) {
        x_aug = apply_policy(cfg.augment, batch.x, step_seed(cfg, step));
      }
      inputs.step_seed = step_seed(cfg, step);

      auto params = trainable_parameters(m.live());
      for (auto& p : params) {
        p.tensor.clear_grad();
      }
      LossBreakdown loss;
      try {
        GradientTape tape;
        GradientTape::Scope scope(tape);
        loss = combined_loss(m, batch.x, batch.labels, x_aug, reg, inputs);
        tape.backward(loss.total);
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
      }
      if (observer) {
        observer(StepContext{step, m, batch, x_aug, inputs, loss});
      }

      double grad_sq = 0.0;
      for (const auto& p : params) {
        if (p.tensor.has_grad()) {
          for (double g : p.tensor.grad()) {
            grad_sq += g * g;
          }
        }
      }
      try {
        optimizer_step(params, adam, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
      }
      if (reg.method == RegMethod::ema_distill) {
        m.ema_update(reg.ema_decay);
      }

      StepRecord rec;
      rec.step = step;
      rec.lr = lr;
      rec.loss_total = loss.total.item();
      rec.loss_ce = loss.ce;
      rec.loss_far = loss.far;
      rec.loss_fcr = loss.fcr;
      rec.loss_reg = loss.reg;
      rec.grad_norm = std::sqrt(grad_sq);
      log.add_step(std::move(rec));
      ++step;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total_steps) {
        evaluate_into(log, step, m.live(), eval_splits);
      }
    }
  }
  for (auto& p : trainable_parameters(m.live())) {
    p.tensor.clear_grad();
  }
  evaluate_into(log, step, m.live(), eval_splits);
  return log;
}

}  // namespace

RunLog finetune(ModelState& m, const Dataset& train, const TrainConfig& cfg,
                std::span<const Dataset> eval_splits, const StepObserver& observer) {
  return train_loop(m, train, cfg, eval_splits, observer, true);
}

RunLog pretrain(ModelState& m, const Dataset& train, const TrainConfig& cfg,
                std::span<const Dataset> eval_splits) {
  return train_loop(m, train, cfg, eval_splits, {}, false);
}

}  // namespace funcreg
