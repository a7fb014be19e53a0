#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cflow/analysis.hpp"
#include "cflow/training.hpp"

namespace cflow::config {

/// Every tunable of the artifact with all defaults materialized. Keys in the
/// config file and in --override flags mirror these field names exactly.
struct ResolvedConfig {
    training::TrainConfig train;
    analysis::DistinctiveCountConfig distinctive;
    Real reward_sigma = 2.0;
    int episode_len = 12;
};

/// Applies one key=value pair; throws std::invalid_argument naming the key
/// on unknown keys or malformed values.
void apply_kv(ResolvedConfig& config, const std::string& key, const std::string& value);

/// Flat key-value file with [section] headers (sections are organizational;
/// keys are globally unique). '#' and ';' start comments.
std::vector<std::pair<std::string, std::string>> parse_config_file(
    const std::string& path);

/// Precedence: command-line overrides > config file > built-in defaults.
ResolvedConfig load_config(const std::optional<std::string>& config_path,
                           const std::vector<std::pair<std::string, std::string>>& overrides);

/// The full resolved key set in a stable order, for the run manifest.
std::vector<std::pair<std::string, std::string>> to_kv(const ResolvedConfig& config);

env::PointRobotEnv build_env(const ResolvedConfig& config);

std::string dims_to_string(const std::vector<int>& dims);

} // namespace cflow::config
