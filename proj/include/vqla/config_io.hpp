#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace vqla {

// Reads a configuration file into a flat JSON object. Accepted inputs are a
// JSON document (nested objects are flattened to their leaf keys) or plain
// `key = value` lines with `#` comments. Values in key=value files are typed
// by content: true/false, numbers, comma lists of numbers, else strings.
nlohmann::json read_config_file(const std::filesystem::path& path);
nlohmann::json parse_config_text(const std::string& text);

// Flattens nested objects; a leaf key that appears twice is an error.
nlohmann::json flatten_config(const nlohmann::json& j);

}  // namespace vqla
