#pragma once

#include <string>

#include "devid/model.hpp"

namespace devid {

// Checkpoint = UTF-8 JSON manifest at `path` (parameter names, shapes, byte
// offsets, model config, provenance) plus a binary blob at `path`.bin of
// concatenated row-major 32-bit little-endian arrays, parameters first,
// then buffers. save -> load -> forward is bit-identical in float builds.
void save_checkpoint(DeviceIdModel& model, const std::string& path,
                     const std::string& provenance_json = "{}");

DeviceIdModel load_checkpoint(const std::string& path);

// Manifest helpers shared with the CLI.
std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& json_text);

} // namespace devid
