#include "funcreg/regularizers.hpp"

#include <array>
#include <cmath>

#include "funcreg/error.hpp"
#include "funcreg/rng.hpp"

namespace funcreg {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<RegMethod, std::string_view>, 9> kMethodNames{{
    {RegMethod::none, "none"},
    {RegMethod::far, "far"},
    {RegMethod::fcr, "fcr"},
    {RegMethod::far_fcr, "far_fcr"},
    {RegMethod::l2sp, "l2sp"},
    {RegMethod::ldifs, "ldifs"},
    {RegMethod::car, "car"},
    {RegMethod::lipsum, "lipsum"},
    {RegMethod::ema_distill, "ema_distill"},
}};

bool uses_far(RegMethod m) { return m == RegMethod::far || m == RegMethod::far_fcr; }
bool uses_fcr(RegMethod m) { return m == RegMethod::fcr || m == RegMethod::far_fcr; }
bool is_baseline(RegMethod m) {
  return m == RegMethod::l2sp || m == RegMethod::ldifs || m == RegMethod::car ||
         m == RegMethod::lipsum || m == RegMethod::ema_distill;
}

Tensor unit_rows(std::size_t count, std::size_t dim, Rng& rng) {
  std::vector<double> data(count * dim);
  for (std::size_t r = 0; r < count; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      data[r * dim + k] = rng.normal();
      sq += data[r * dim + k] * data[r * dim + k];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t k = 0; k < dim; ++k) {
      data[r * dim + k] *= inv;
    }
  }
  return Tensor::from_data({count, dim}, std::move(data));
}

}  // namespace

std::string_view to_string(RegMethod method) {
  for (const auto& [m, name] : kMethodNames) {
    if (m == method) {
      return name;
    }
  }
  return "unknown";
}

RegMethod reg_method_from_string(std::string_view name) {
  for (const auto& [m, n] : kMethodNames) {
    if (n == name) {
      return m;
    }
  }
  throw ConfigError("unknown regularizer method '" + std::string(name) + "'");
}

std::string_view to_string(OutputSpace space) {
  return space == OutputSpace::probabilities ? "probabilities" : "logits";
}

OutputSpace output_space_from_string(std::string_view name) {
  if (name == "probabilities") {
    return OutputSpace::probabilities;
  }
  if (name == "logits") {
    return OutputSpace::logits;
  }
  throw ConfigError("unknown output_space '" + std::string(name) + "'");
}

void RegularizerConfig::validate() const {
  for (double l : {lambda_far, lambda_fcr, lambda_baseline}) {
    if (!std::isfinite(l) || l < 0.0) {
      throw ConfigError("regularizer weights must be finite and >= 0");
    }
  }
  if (lipsum_probes < 1) {
    throw ConfigError("lipsum_probes must be >= 1");
  }
  if (car_contexts < 2) {
    throw ConfigError("car_contexts must be >= 2");
  }
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
    throw ConfigError("ema_decay must lie in (0, 1)");
  }
}

std::vector<std::string> RegularizerConfig::warnings() const {
  std::vector<std::string> out;
  const std::string name(to_string(method));
  if (method == RegMethod::far && lambda_far == 0.0) {
    out.push_back("method far with lambda_far = 0 reduces to plain fine-tuning");
  }
  if (method == RegMethod::fcr && lambda_fcr == 0.0) {
    out.push_back("method fcr with lambda_fcr = 0 reduces to plain fine-tuning");
  }
  if (method == RegMethod::far_fcr && lambda_far == 0.0 && lambda_fcr == 0.0) {
    out.push_back("method far_fcr with both weights 0 reduces to plain fine-tuning");
  }
  if (is_baseline(method) && lambda_baseline == 0.0) {
    out.push_back("method " + name + " with lambda_baseline = 0 reduces to plain fine-tuning");
  }
  return out;
}

bool RegularizerConfig::uses_augmentation() const {
  return uses_far(method) || uses_fcr(method);
}

json to_json(const RegularizerConfig& cfg) {
  return {{"method", to_string(cfg.method)},
          {"lambda_far", cfg.lambda_far},
          {"lambda_fcr", cfg.lambda_fcr},
          {"lambda_baseline", cfg.lambda_baseline},
          {"lipsum_probes", cfg.lipsum_probes},
          {"car_contexts", cfg.car_contexts},
          {"ema_decay", cfg.ema_decay},
          {"output_space", to_string(cfg.output_space)}};
}

RegularizerConfig regularizer_from_json(const json& j, const RegularizerConfig& base) {
  if (!j.is_object()) {
    throw ConfigError("regularizer must be a JSON object");
  }
  static constexpr std::array<std::string_view, 8> kKeys{
      "method",        "lambda_far",   "lambda_fcr", "lambda_baseline",
      "lipsum_probes", "car_contexts", "ema_decay",  "output_space"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ConfigError("unknown key '" + key + "' in regularizer");
    }
  }
  RegularizerConfig c = base;
  try {
    if (j.contains("method")) {
      c.method = reg_method_from_string(j.at("method").get<std::string>());
    }
    c.lambda_far = j.value("lambda_far", c.lambda_far);
    c.lambda_fcr = j.value("lambda_fcr", c.lambda_fcr);
    c.lambda_baseline = j.value("lambda_baseline", c.lambda_baseline);
    c.lipsum_probes = j.value("lipsum_probes", c.lipsum_probes);
    c.car_contexts = j.value("car_contexts", c.car_contexts);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    if (j.contains("output_space")) {
      c.output_space = output_space_from_string(j.at("output_space").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("regularizer: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Individual terms

Tensor model_output(const ModelParams& params, const Tensor& x, OutputSpace space) {
  Tensor z = forward_logits(params, x);
  return space == OutputSpace::probabilities ? softmax(z) : z;
}

Tensor far_loss(const ModelState& m, const Tensor& x_aug, OutputSpace space) {
  const ModelParams& frozen = m.snapshot();
  Tensor reference = model_output(frozen, x_aug, space).detach();
  return mean_squared_l2(model_output(m.live(), x_aug, space), reference);
}

Tensor fcr_loss(const ModelState& m, const Tensor& x, const Tensor& x_aug) {
  if (x.shape() != x_aug.shape()) {
    throw ShapeError("fcr_loss: clean and augmented batches differ in shape");
  }
  Tensor clean = softmax(forward_logits(m.live(), x));
  Tensor augmented = softmax(forward_logits(m.live(), x_aug));
  return kl_divergence(clean, augmented);
}

Tensor l2sp_loss(const ModelState& m) {
  const auto& live = m.live().encoder.layers;
  const auto& ref = m.snapshot().encoder.layers;
  if (live.size() != ref.size()) {
    throw ShapeError("l2sp_loss: snapshot has a different layer count");
  }
  Tensor total;
  auto add_term = [&total](const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    Tensor term = sum(mul(d, d));
    total = total.defined() ? add(total, term) : term;
  };
  for (std::size_t i = 0; i < live.size(); ++i) {
    add_term(live[i].weight, ref[i].weight);
    add_term(live[i].bias, ref[i].bias);
  }
  return total;
}

Tensor ldifs_loss(const ModelState& m, const Tensor& x) {
  Tensor reference = forward_features(m.snapshot(), x).detach();
  return mean_squared_l2(forward_features(m.live(), x), reference);
}

Tensor make_context_prototypes(std::size_t count, std::size_t dim, std::uint64_t seed) {
  if (count < 2) {
    throw ConfigError("CAR needs at least 2 context prototypes");
  }
  Rng rng(derive_seed({seed, 0xCA7}));
  return unit_rows(count, dim, rng);
}

Tensor car_loss(const ModelState& m, const Tensor& x, const Tensor& context_prototypes) {
  if (!context_prototypes.defined() || context_prototypes.rank() != 2 ||
      context_prototypes.dim(0) < 2) {
    throw ConfigError("CAR needs a [C x D] context matrix with C >= 2");
  }
  Tensor ctx_t = transpose(context_prototypes);
  Tensor teacher = softmax(matmul(forward_features(m.snapshot(), x), ctx_t)).detach();
  Tensor student = softmax(matmul(forward_features(m.live(), x), ctx_t));
  return kl_divergence(teacher, student);
}

Tensor make_lipsum_probes(std::size_t count, std::size_t dim, std::uint64_t step_seed) {
  if (count < 1) {
    throw ConfigError("lipsum needs at least one probe");
  }
  Rng rng(derive_seed({step_seed, 0x11B5}));
  return unit_rows(count, dim, rng);
}

Tensor lipsum_loss(const ModelState& m, const Tensor& x, const Tensor& probes) {
  Tensor reference = forward_features(m.snapshot(), x).detach();
  Tensor diff = sub(forward_features(m.live(), x), reference);
  Tensor proj = matmul(diff, transpose(probes));  // [B x M]
  const double batch = static_cast<double>(x.dim(0));
  const double m_probes = static_cast<double>(probes.dim(0));
  return scale(sum(mul(proj, proj)), 1.0 / (batch * 2.0 * m_probes));
}

Tensor lipsum_loss(const ModelState& m, const Tensor& x, std::size_t count,
                   std::uint64_t step_seed) {
  return lipsum_loss(m, x, make_lipsum_probes(count, m.live().encoder.output_dim(), step_seed));
}

Tensor ema_distill_loss(const ModelState& m, const Tensor& x) {
  Tensor teacher = softmax(forward_logits(m.ema(), x)).detach();
  Tensor student = softmax(forward_logits(m.live(), x));
  return kl_divergence(teacher, student);
}

// ---------------------------------------------------------------------------

LossBreakdown combined_loss(const ModelState& m, const Tensor& x, std::span<const int> labels,
                            const Tensor& x_aug, const RegularizerConfig& cfg,
                            const RegularizerInputs& inputs) {
  cfg.validate();
  LossBreakdown out;
  Tensor ce = cross_entropy(forward_logits(m.live(), x), labels);
  out.ce = ce.item();
  Tensor total = ce;

  if (cfg.uses_augmentation() && !x_aug.defined()) {
    throw StateError("method " + std::string(to_string(cfg.method)) + " needs augmented inputs");
  }
  if (uses_far(cfg.method)) {
    Tensor far = far_loss(m, x_aug, cfg.output_space);
    out.far = far.item();
    total = add(total, scale(far, cfg.lambda_far));
  }
  if (uses_fcr(cfg.method)) {
    Tensor fcr = fcr_loss(m, x, x_aug);
    out.fcr = fcr.item();
    total = add(total, scale(fcr, cfg.lambda_fcr));
  }
  if (is_baseline(cfg.method)) {
    Tensor reg;
    switch (cfg.method) {
      case RegMethod::l2sp:
        reg = l2sp_loss(m);
        break;
      case RegMethod::ldifs:
        reg = ldifs_loss(m, x);
        break;
      case RegMethod::car:
        reg = car_loss(m, x, inputs.context_prototypes);
        break;
      case RegMethod::lipsum:
        reg = lipsum_loss(m, x, cfg.lipsum_probes, inputs.step_seed);
        break;
      case RegMethod::ema_distill:
        reg = ema_distill_loss(m, x);
        break;
      default:
        break;
    }
    out.reg = reg.item();
    total = add(total, scale(reg, cfg.lambda_baseline));
  }
  out.total = total;
  return out;
}

}  // namespace funcreg
