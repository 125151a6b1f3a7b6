#pragma once

#include <filesystem>

#include "dsc/model.hpp"

namespace dsc {

/// Checkpoint file: one compact JSON header line {schema_version, model_config,
/// manifest: [{name, shape, offset}...]} followed by the raw little-endian
/// 64-bit float buffers in manifest order. Offsets are bytes into the binary
/// section. Byte-identical for identical parameters.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsc
