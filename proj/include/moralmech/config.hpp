#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "json.hpp"

namespace moralmech {

/// Reads the TOML subset used by run configs into a JSON object:
///
///   # comment
///   [section]            -> nested object (dotted names nest further)
///   key = 1              -> integer
///   key = 1.5e-3         -> float
///   key = true           -> bool
///   key = "text"         -> string
///   key = [1, [2, 3]]    -> (nested) array; may span lines
///
/// Throws ConfigError with the offending line number.
nlohmann::json parse_config(std::istream& in);
nlohmann::json parse_config_file(const std::filesystem::path& path);
nlohmann::json parse_config_string(const std::string& text);

/// Section `name` of `config` (an empty object when absent).
nlohmann::json config_section(const nlohmann::json& config, const std::string& name);

}  // namespace moralmech
