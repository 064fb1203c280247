#pragma once

// JSON forms of the configuration records, shared by manifests, recipes and
// checkpoints.

#include "normfree/model.hpp"
#include "normfree/trainer.hpp"

#include <json.hpp>

namespace normfree {

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const TrainConfig& config);

/// Overwrites only the keys present in j. Unknown keys and bad values throw ConfigError.
void apply_json(ModelConfig& config, const nlohmann::json& j);
void apply_json(TrainConfig& config, const nlohmann::json& j);

ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace normfree
