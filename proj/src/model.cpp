#include "funcreg/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "funcreg/error.hpp"
#include "funcreg/rng.hpp"
#include "json.hpp"

namespace funcreg {

namespace {

std::size_t tensor_count(const ModelParams& p) { return 2 * p.encoder.layers.size() + 1; }

}  // namespace

// ---------------------------------------------------------------------------
// Parameter containers

std::size_t EncoderParams::input_dim() const {
  validate();
  return layers.front().weight.dim(0);
}

std::size_t EncoderParams::output_dim() const {
  validate();
  return layers.back().weight.dim(1);
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    n += l.weight.size() + l.bias.size();
  }
  return n;
}

void EncoderParams::validate() const {
  if (layers.empty()) {
    throw ShapeError("encoder has no layers");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.dim(0) != l.weight.dim(1)) {
      throw ShapeError("encoder layer " + std::to_string(i) + " has inconsistent shapes");
    }
    if (i > 0 && layers[i - 1].weight.dim(1) != l.weight.dim(0)) {
      throw ShapeError("encoder layer " + std::to_string(i) + " input does not chain");
    }
  }
}

ModelParams ModelParams::deep_copy(bool requires_grad) const {
  ModelParams out;
  out.encoder.layers.reserve(encoder.layers.size());
  for (const auto& l : encoder.layers) {
    out.encoder.layers.push_back({l.weight.clone(requires_grad), l.bias.clone(requires_grad)});
  }
  out.head.trainable = head.trainable;
  out.head.prototypes = head.prototypes.clone(requires_grad && head.trainable);
  return out;
}

std::vector<NamedTensor> ModelParams::named_tensors() const {
  std::vector<NamedTensor> out;
  out.reserve(tensor_count(*this));
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    const std::string prefix = "encoder." + std::to_string(i);
    out.push_back({prefix + ".weight", encoder.layers[i].weight});
    out.push_back({prefix + ".bias", encoder.layers[i].bias});
  }
  out.push_back({"head.prototypes", head.prototypes});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  return encoder.parameter_count() + head.prototypes.size();
}

ModelParams init_params(const ModelArch& arch, std::uint64_t seed) {
  if (arch.num_classes < 2) {
    throw ConfigError("model needs at least 2 classes");
  }
  if (arch.input_dim == 0 || arch.embed_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  Rng rng(derive_seed({seed, 0x1417}));
  ModelParams p;
  std::vector<std::size_t> dims{arch.input_dim};
  dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
  dims.push_back(arch.embed_dim);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t fan_in = dims[i];
    const std::size_t fan_out = dims[i + 1];
    const bool last = i + 2 == dims.size();
    const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    std::vector<double> w(fan_in * fan_out);
    for (double& v : w) {
      v = rng.normal(0.0, stddev);
    }
    p.encoder.layers.push_back({Tensor::parameter({fan_in, fan_out}, std::move(w)),
                                Tensor::zeros({fan_out}, true)});
  }
  std::vector<double> protos(arch.num_classes * arch.embed_dim);
  for (double& v : protos) {
    v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(arch.embed_dim)));
  }
  p.head.prototypes = Tensor::parameter({arch.num_classes, arch.embed_dim}, std::move(protos));
  p.head.trainable = true;
  return p;
}

// ---------------------------------------------------------------------------
// Forward

Tensor forward_encoder(const EncoderParams& encoder, const Tensor& x) {
  const auto& layers = encoder.layers;
  if (layers.empty()) {
    throw ShapeError("encoder has no layers");
  }
  if (x.rank() != 2 || x.dim(1) != layers.front().weight.dim(0)) {
    throw ShapeError("forward_features: input width does not match encoder input " +
                     std::to_string(layers.front().weight.dim(0)));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = add(matmul(h, layers[i].weight), layers[i].bias);
    if (i + 1 < layers.size()) {
      h = relu(h);
    }
  }
  return h;
}

Tensor forward_features(const ModelParams& params, const Tensor& x) {
  return forward_encoder(params.encoder, x);
}

Tensor head_logits(const PrototypeHead& head, const Tensor& features) {
  return matmul(features, transpose(head.prototypes));
}

Tensor forward_logits(const ModelParams& params, const Tensor& x) {
  return head_logits(params.head, forward_features(params, x));
}

Tensor forward_features(const ModelState& m, const Tensor& x) {
  return forward_features(m.live(), x);
}

Tensor forward_logits(const ModelState& m, const Tensor& x) {
  return forward_logits(m.live(), x);
}

// ---------------------------------------------------------------------------
// ModelState

ModelState::ModelState(ModelParams live) : live_(std::move(live)) { live_.encoder.validate(); }

const ModelParams& ModelState::snapshot() const {
  if (!snapshot_) {
    throw StateError("model has no snapshot");
  }
  return *snapshot_;
}

void ModelState::take_snapshot() { snapshot_ = live_.deep_copy(false); }

const ModelParams& ModelState::ema() const {
  if (!ema_) {
    throw StateError("EMA shadow not initialised");
  }
  return *ema_;
}

void ModelState::init_ema() { ema_ = live_.deep_copy(false); }

void ModelState::ema_update(double rho) {
  if (!ema_) {
    throw StateError("ema_update before init_ema");
  }
  auto shadow = ema_->named_tensors();
  auto live = live_.named_tensors();
  for (std::size_t t = 0; t < shadow.size(); ++t) {
    auto s = shadow[t].tensor.mutable_data();
    auto l = live[t].tensor.data();
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = rho * s[i] + (1.0 - rho) * l[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Flat views and interpolation

void require_same_shapes(const ModelParams& a, const ModelParams& b) {
  auto ta = a.named_tensors();
  auto tb = b.named_tensors();
  if (ta.size() != tb.size()) {
    throw ShapeError("models have different layer counts");
  }
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].tensor.shape() != tb[i].tensor.shape()) {
      throw ShapeError("models differ in shape of " + ta[i].name);
    }
  }
}

std::vector<double> flatten(const ModelParams& params) {
  std::vector<double> out;
  out.reserve(params.parameter_count());
  for (const auto& nt : params.named_tensors()) {
    auto d = nt.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

void assign_flat(ModelParams& params, std::span<const double> values) {
  if (values.size() != params.parameter_count()) {
    throw ShapeError("assign_flat: expected " + std::to_string(params.parameter_count()) +
                     " values, got " + std::to_string(values.size()));
  }
  std::size_t offset = 0;
  for (auto& nt : params.named_tensors()) {
    auto d = nt.tensor.mutable_data();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), d.size(), d.begin());
    offset += d.size();
  }
}

double parameter_distance(const ModelParams& a, const ModelParams& b) {
  require_same_shapes(a, b);
  auto fa = flatten(a);
  auto fb = flatten(b);
  double sq = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double d = fa[i] - fb[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

ModelParams interpolate_weights(const ModelParams& theta0, const ModelParams& theta_ft,
                                double alpha) {
  require_same_shapes(theta0, theta_ft);
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("interpolation alpha must lie in [0, 1]");
  }
  ModelParams out = theta_ft.deep_copy(false);
  auto a = flatten(theta0);
  auto b = flatten(theta_ft);
  std::vector<double> mixed(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    // Endpoints are returned exactly rather than through the blend formula.
    mixed[i] = alpha == 0.0 ? a[i] : alpha == 1.0 ? b[i] : (1.0 - alpha) * a[i] + alpha * b[i];
  }
  assign_flat(out, mixed);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using nlohmann::json;

std::filesystem::path stem_of(const std::filesystem::path& path) {
  auto ext = path.extension();
  if (ext == ".json" || ext == ".bin") {
    return path.parent_path() / path.stem();
  }
  return path;
}

void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ParseError("cannot open " + path.string(), 0);
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& path) {
  auto s = stem_of(path);
  s += ".json";
  return s;
}

std::filesystem::path checkpoint_payload_path(const std::filesystem::path& path) {
  auto s = stem_of(path);
  s += ".bin";
  return s;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const CheckpointMeta& meta) {
  params.encoder.validate();
  std::string payload;
  json tensors = json::array();
  for (const auto& nt : params.named_tensors()) {
    const std::size_t offset = payload.size();
    for (double v : nt.tensor.data()) {
      append_le(payload, v);
    }
    tensors.push_back({{"name", nt.name},
                       {"shape", nt.tensor.shape()},
                       {"byte_offset", offset},
                       {"byte_len", payload.size() - offset}});
  }
  json manifest = {{"version", 1},
                   {"head_trainable", params.head.trainable},
                   {"classes", meta.classes},
                   {"tensors", tensors}};

  const auto stem = stem_of(path);
  if (stem.has_parent_path()) {
    std::filesystem::create_directories(stem.parent_path());
  }
  std::ofstream bin(checkpoint_payload_path(stem), std::ios::binary | std::ios::trunc);
  bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::ofstream js(checkpoint_manifest_path(stem), std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!bin || !js) {
    throw Error("failed writing checkpoint " + stem.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto stem = stem_of(path);
  const std::string text = read_file(checkpoint_manifest_path(stem));
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()), e.byte);
  }
  const std::string payload = read_file(checkpoint_payload_path(stem));
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());

  Checkpoint ck;
  try {
    if (manifest.at("version").get<int>() != 1) {
      throw ParseError("unsupported checkpoint version", 0);
    }
    ck.params.head.trainable = manifest.value("head_trainable", true);
    ck.meta.classes = manifest.value("classes", std::vector<int>{});

    std::vector<std::pair<std::string, Tensor>> loaded;
    std::size_t expected_offset = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::size_t>();
      const auto len = entry.at("byte_len").get<std::size_t>();
      if (len != shape_size(shape) * 8 || offset != expected_offset) {
        throw ParseError("checkpoint tensor " + name + " manifest disagrees with its shape",
                         offset);
      }
      if (offset + len > payload.size()) {
        throw ParseError("checkpoint payload truncated while reading " + name, payload.size());
      }
      std::vector<double> data(shape_size(shape));
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = read_le(bytes + offset + 8 * i);
      }
      loaded.emplace_back(name, Tensor::from_data(shape, std::move(data)));
      expected_offset = offset + len;
    }
    if (expected_offset != payload.size()) {
      throw ParseError("checkpoint payload has trailing bytes", expected_offset);
    }
    if (loaded.size() < 3 || loaded.size() % 2 == 0) {
      throw ParseError("checkpoint has an unexpected tensor list", 0);
    }
    const std::size_t n_layers = (loaded.size() - 1) / 2;
    for (std::size_t i = 0; i < n_layers; ++i) {
      const std::string prefix = "encoder." + std::to_string(i);
      if (loaded[2 * i].first != prefix + ".weight" || loaded[2 * i + 1].first != prefix + ".bias") {
        throw ParseError("checkpoint tensor order broken at " + loaded[2 * i].first, 0);
      }
      ck.params.encoder.layers.push_back(
          {loaded[2 * i].second.clone(true), loaded[2 * i + 1].second.clone(true)});
    }
    if (loaded.back().first != "head.prototypes") {
      throw ParseError("checkpoint lacks head.prototypes", 0);
    }
    ck.params.head.prototypes = loaded.back().second.clone(ck.params.head.trainable);
  } catch (const json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()), 0);
  } catch (const ShapeError& e) {
    throw ParseError("checkpoint: " + std::string(e.what()), 0);
  }
  try {
    ck.params.encoder.validate();
  } catch (const ShapeError& e) {
    throw ParseError("checkpoint: " + std::string(e.what()), 0);
  }
  if (ck.params.head.dim() != ck.params.encoder.output_dim()) {
    throw ParseError("checkpoint head width does not match encoder output", 0);
  }
  if (!ck.meta.classes.empty() && ck.meta.classes.size() != ck.params.head.num_classes()) {
    throw ParseError("checkpoint class list does not match head rows", 0);
  }
  return ck;
}

}  // namespace funcreg
