#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "funcreg/data.hpp"
#include "funcreg/model.hpp"
#include "funcreg/training.hpp"
#include "json.hpp"

namespace funcreg {

struct ModelConfig {
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t embed_dim = 16;
  std::uint64_t init_seed = 1;
  /// Fine-tune the prototype head together with the encoder.
  bool train_head = true;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
ModelArch make_arch(const ModelConfig& cfg, std::size_t input_dim, std::size_t num_classes);

enum class Phase { pretrain, finetune };

/// A run config has the sections data, model, train, regularizer and
/// augment. Absent sections and keys keep the defaults of the phase.
struct RunConfig {
  ShiftBenchmark data = default_benchmark();
  ModelConfig model;
  TrainConfig train;
};

RunConfig default_run_config(Phase phase);
/// Throws ConfigError naming the first unknown key.
RunConfig run_config_from_json(const nlohmann::json& j, Phase phase);
/// Throws ConfigError for unreadable or malformed files.
RunConfig load_run_config(const std::filesystem::path& path, Phase phase);
nlohmann::json to_json(const RunConfig& cfg);

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);
/// Digest of the canonical dump (sorted keys, no whitespace).
std::string config_hash(const nlohmann::json& config);

struct RunManifest {
  std::string command;
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_clock_s = 0.0;
  /// Free-form run description (e.g. the regularization method).
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& manifest);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace funcreg
