#pragma once

#include <filesystem>
#include <optional>

#include "creat/model/transformer.hpp"

namespace creat::model {

// Binary layout, all integers and floats little-endian:
//   "CREAT1"
//   u32 config length, config as UTF-8 JSON text
//   repeated until end of file:
//     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
inline constexpr char kCheckpointMagic[] = "CREAT1";

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);

// Reads a checkpoint and checks every tensor against the stored config, or
// against `expected` when given. Mismatches throw ConfigError naming the tensor.
ModelParams load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace creat::model
