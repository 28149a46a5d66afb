#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "moralmech/scenario.hpp"

namespace moralmech {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitData = 2,
  kExitNumerical = 3,
};

/// Parses {"outcome0": {"Man": 3}, "outcome1": {"Criminal": 3}}. Throws
/// DataError for malformed input or unknown tokens.
Scenario scenario_from_json(const nlohmann::json& j, const CharacterVocab& vocab);
nlohmann::json scenario_to_json(const Scenario& s, const CharacterVocab& vocab);

/// Raises glibc's mmap and trim thresholds so the many short-lived
/// activation buffers are recycled instead of mapped and unmapped each step.
/// No-op on other C libraries.
void tune_allocator();

/// Entry point of the `moralmech` binary. Returns an ExitCode.
int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace moralmech
