#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "hbert/model.hpp"

namespace hbert {

// Single-file checkpoint: magic, a JSON manifest (config, task list,
// vocabulary hash), then named tensor blobs (shape header + 64-bit floats,
// little endian). Writing the same weights twice produces identical bytes.
struct Checkpoint {
    nlohmann::json manifest;
    Parameters params;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const nlohmann::json& manifest,
                     const Parameters& params);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace hbert
