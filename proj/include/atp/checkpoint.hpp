#pragma once

#include <filesystem>

#include "atp/model.hpp"
#include "json.hpp"

namespace atp {

enum class CheckpointFormat {
    split,       ///< <stem>.json manifest + <stem>.bin little-endian float64 array
    single_json  ///< parameters inlined in the manifest
};

/// Writes the checkpoint; `manifest_path` should end in ".json". Returns the
/// list of files written.
std::vector<std::filesystem::path> save_checkpoint(const ParameterStore& model,
                                                   const std::filesystem::path& manifest_path,
                                                   CheckpointFormat format = CheckpointFormat::split);

ParameterStore load_checkpoint(const std::filesystem::path& manifest_path);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

}  // namespace atp
