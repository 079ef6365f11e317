#pragma once

#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

namespace cubevit::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitOther = 1;

std::vector<std::string> commands();

/// Full default configuration of a subcommand; every accepted key appears here.
json default_config(const std::string& command);

/// Recursively overlays `file` on `defaults`, then applies `--key value`
/// pairs (dotted keys for nested objects). Unknown keys and type changes
/// throw UsageError naming the key.
json merge_config(const json& defaults, const json& file, const std::vector<std::string>& overrides);

/// Runs a subcommand with an already merged config, writing metrics.json,
/// config.json and the log into config["out"]. Returns the metrics; artifact
/// paths inside them are relative to config["out"].
json run_command(const std::string& command, const json& config, std::ostream& out);

/// Entry point: `<command> [--config file.json] [--key value ...]`.
/// Maps exceptions to exit codes (2 usage, 3 data/format, 4 numeric).
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace cubevit::cli
