#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "creat/model/config.hpp"
#include "creat/train/trainer.hpp"

namespace creat::cli {

// One column of a comparison grid: a label and the attack it runs.
struct GridEntry {
  std::string label;
  attack::AttackConfig attack;
  bool operator==(const GridEntry&) const = default;
};

struct ExperimentConfig {
  model::EncoderConfig model;
  train::TrainConfig train;          // attack and task live inside
  std::string output_dir;            // may be empty when --out is given
  std::vector<std::uint64_t> seeds;  // grid seeds; defaults to {train.seed}
  std::vector<GridEntry> grid;       // "modes"; defaults to the single attack
  std::string init_checkpoint;       // optional encoder warm start

  // Nested invariants plus the seed list rules. Throws ConfigError.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Strict reader: unknown keys and wrong types are rejected with the field
// path in the message. Required: task.kind, attack.mode, train.max_steps.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Writes every field, so parse_config(serialize(c)) == c.
nlohmann::json serialize(const ExperimentConfig& config);

nlohmann::json to_json(const train::TrainConfig& config);
nlohmann::json to_json(const attack::AttackConfig& config);

}  // namespace creat::cli
