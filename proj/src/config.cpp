#include "voxopt/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxopt/common.hpp"

namespace voxopt {
namespace {

constexpr int kMaxIncludeDepth = 16;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

void parse_into(const std::string& text, const std::string& base_dir,
                std::map<std::string, std::string>& values, int depth) {
  if (depth > kMaxIncludeDepth) {
    throw ParseError("config include nesting exceeds " + std::to_string(kMaxIncludeDepth) +
                     " levels (include cycle?)");
  }
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0) {
      const std::string target = trim(line.substr(8));
      if (target.empty()) {
        throw ParseError("config include without a path at line " + std::to_string(line_no));
      }
      const std::filesystem::path resolved = std::filesystem::path(base_dir) / target;
      std::ifstream file(resolved);
      if (!file) throw IoError("cannot open included config: " + resolved.string());
      std::stringstream buffer;
      buffer << file.rdbuf();
      parse_into(buffer.str(), resolved.parent_path().string(), values, depth + 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) + " has no '=': " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ParseError("config line " + std::to_string(line_no) + " has an empty key");
    }
    values[key] = value;
  }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0') {
    throw ParseError("config key " + key + " is not an integer: " + value);
  }
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0') {
    throw ParseError("config key " + key + " is not a number: " + value);
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ParseError("config key " + key + " is not a boolean: " + value);
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<std::int64_t> out;
  std::istringstream in(value);
  std::string part;
  while (std::getline(in, part, ',')) {
    const std::string item = trim(part);
    if (item.empty()) throw ParseError("config key " + key + " has an empty list item");
    out.push_back(parse_int(key, item));
  }
  if (out.empty()) throw ParseError("config key " + key + " is an empty list");
  return out;
}

}  // namespace

Config Config::load(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw IoError("cannot open config: " + path);
  std::stringstream buffer;
  buffer << file.rdbuf();
  return from_text(buffer.str(), std::filesystem::path(path).parent_path().string());
}

Config Config::from_text(const std::string& text, const std::string& base_dir) {
  Config cfg;
  parse_into(text, base_dir.empty() ? "." : base_dir, cfg.values_, 0);
  return cfg;
}

bool Config::has(const std::string& key) const { return values_.count(key) != 0; }

std::string Config::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("missing config key: " + key);
  used_.insert(key);
  return it->second;
}

std::string Config::get_string(const std::string& key) const { return raw(key); }
std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

std::int64_t Config::get_int(const std::string& key) const { return parse_int(key, raw(key)); }
std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? parse_int(key, raw(key)) : fallback;
}

double Config::get_double(const std::string& key) const { return parse_double(key, raw(key)); }
double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? parse_double(key, raw(key)) : fallback;
}

bool Config::get_bool(const std::string& key) const { return parse_bool(key, raw(key)); }
bool Config::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? parse_bool(key, raw(key)) : fallback;
}

std::vector<std::int64_t> Config::get_int_list(const std::string& key) const {
  return parse_int_list(key, raw(key));
}
std::vector<std::int64_t> Config::get_int_list(
    const std::string& key, const std::vector<std::int64_t>& fallback) const {
  return has(key) ? parse_int_list(key, raw(key)) : fallback;
}

std::vector<std::string> Config::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [key, value] : values_) {
    if (used_.count(key) == 0) out.push_back(key);
  }
  return out;
}

}  // namespace voxopt
