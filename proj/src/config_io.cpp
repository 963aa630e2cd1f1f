#include "vqla/config_io.hpp"

#include <fstream>
#include <sstream>

#include "vqla/error.hpp"

namespace vqla {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

nlohmann::json typed_value(const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  try {
    size_t used = 0;
    const long long i = std::stoll(raw, &used);
    if (used == raw.size()) return i;
  } catch (const std::exception&) {
  }
  try {
    size_t used = 0;
    const double d = std::stod(raw, &used);
    if (used == raw.size()) return d;
  } catch (const std::exception&) {
  }
  if (raw.find(',') != std::string::npos) {
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(raw);
    std::string item;
    bool numeric = true;
    while (std::getline(ss, item, ',')) {
      auto v = typed_value(trim(item));
      numeric = numeric && v.is_number();
      arr.push_back(v);
    }
    if (numeric) return arr;
  }
  return raw;
}

void flatten_into(const nlohmann::json& j, nlohmann::json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.value().is_object()) {
      flatten_into(it.value(), out);
    } else {
      if (out.contains(it.key())) throw ConfigError("duplicate config key: " + it.key());
      out[it.key()] = it.value();
    }
  }
}

}  // namespace

nlohmann::json flatten_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be an object");
  nlohmann::json out = nlohmann::json::object();
  flatten_into(j, out);
  return out;
}

nlohmann::json parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return flatten_config(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("invalid JSON config: ") + e.what());
    }
  }
  nlohmann::json out = nlohmann::json::object();
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", lineno);
    out[key] = typed_value(trim(line.substr(eq + 1)));
  }
  return out;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace vqla
