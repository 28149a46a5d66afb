#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace moralmech {

inline constexpr const char* kToolName = "moralmech";
inline constexpr const char* kToolVersion = "1.0.0";

/// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

/// Header block attached to every report: tool, version, command, config
/// hash, seed and a UTC timestamp (`generated_at`, the only field that varies
/// between identical runs).
nlohmann::json provenance(const std::string& command, const nlohmann::json& config, std::uint64_t seed);

/// Writes `body` with `provenance` under the key "header", pretty-printed.
void write_json_report(const std::filesystem::path& path, const nlohmann::json& header, const nlohmann::json& body);

/// CSV with the provenance as leading `# key: value` comment lines.
void write_csv_report(const std::filesystem::path& path, const nlohmann::json& header,
                      const std::vector<std::string>& columns, const std::vector<std::vector<std::string>>& rows);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace moralmech
