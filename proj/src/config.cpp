#include "funcreg/config.hpp"

#include <cstdio>
#include <fstream>

#include "funcreg/error.hpp"

namespace funcreg {

using nlohmann::json;

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

json to_json(const ModelConfig& cfg) {
  return {{"hidden", cfg.hidden},
          {"embed_dim", cfg.embed_dim},
          {"init_seed", cfg.init_seed},
          {"train_head", cfg.train_head}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"hidden", "embed_dim", "init_seed", "train_head"}, "model");
  ModelConfig c;
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.train_head = j.value("train_head", c.train_head);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (c.embed_dim == 0) {
    throw ConfigError("model.embed_dim must be positive");
  }
  for (auto h : c.hidden) {
    if (h == 0) {
      throw ConfigError("model.hidden widths must be positive");
    }
  }
  return c;
}

ModelArch make_arch(const ModelConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  ModelArch a;
  a.input_dim = input_dim;
  a.hidden = cfg.hidden;
  a.embed_dim = cfg.embed_dim;
  a.num_classes = num_classes;
  return a;
}

RunConfig default_run_config(Phase phase) {
  RunConfig c;
  c.train = phase == Phase::pretrain ? default_pretrain_config() : default_finetune_config();
  return c;
}

RunConfig run_config_from_json(const json& j, Phase phase) {
  reject_unknown(j, {"data", "model", "train", "regularizer", "augment"}, "run config");
  RunConfig c = default_run_config(phase);
  if (j.contains("data")) {
    c.data = benchmark_from_json(j.at("data"));
  }
  if (j.contains("model")) {
    c.model = model_config_from_json(j.at("model"));
  }
  if (j.contains("train")) {
    c.train = train_config_from_json(j.at("train"), c.train);
  }
  if (j.contains("regularizer")) {
    c.train.regularizer = regularizer_from_json(j.at("regularizer"), c.train.regularizer);
  }
  if (j.contains("augment")) {
    c.train.augment = augment_from_json(j.at("augment"), c.train.augment);
  }
  c.train.validate();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path, Phase phase) {
  return run_config_from_json(read_json_file(path), phase);
}

json to_json(const RunConfig& cfg) {
  return {{"data", to_json(cfg.data)},
          {"model", to_json(cfg.model)},
          {"train", to_json(cfg.train)},
          {"regularizer", to_json(cfg.train.regularizer)},
          {"augment", to_json(cfg.train.augment)}};
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const json& config) { return fnv1a_hex(config.dump()); }

json to_json(const RunManifest& m) {
  return {{"command", m.command},        {"run_id", m.run_id},   {"config_hash", m.config_hash},
          {"seed", m.seed},              {"inputs", m.inputs},   {"outputs", m.outputs},
          {"wall_clock_s", m.wall_clock_s}, {"extra", m.extra}};
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << to_json(manifest).dump(2) << '\n';
}

}  // namespace funcreg
