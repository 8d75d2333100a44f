#pragma once

// Flat key=value configuration with dotted keys, e.g.
//
//   objective.is_mode = sequence_geo
//   objective.kl.beta = 0.001
//   train.learning_rate = 4
//
// '#' starts a comment. Unknown keys are errors.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tepo/trainer.hpp"

namespace tepo {

/// Every key with its canonical value, sorted by key.
std::map<std::string, std::string> config_to_map(const TrainConfig& config);

/// Throws ConfigError naming the key on unknown keys or bad values.
void apply_setting(TrainConfig& config, const std::string& key, const std::string& value);

/// Parses "key=value" lines. `origin` appears in diagnostics.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& origin);

TrainConfig config_from_text(const std::string& text, const std::string& origin = "<text>");
TrainConfig load_config(const std::filesystem::path& path);

/// Sorted "key = value" lines; what config.resolved holds.
std::string serialize_config(const TrainConfig& config);

/// 16 hex digits of FNV-1a over the canonical serialization minus train.seed.
std::string config_hash(const TrainConfig& config);

std::string format_double(double v);

}  // namespace tepo
