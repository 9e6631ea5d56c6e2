#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace voxopt {

/// Flat key=value configuration text. One pair per line, `#` starts a
/// comment, blank lines are skipped, and `include <path>` splices another
/// file at that point (relative to the including file). Later assignments
/// override earlier ones, so a file can include defaults and then override.
class Config {
 public:
  static Config load(const std::string& path);
  /// Parses text directly; `include` resolves relative to `base_dir`.
  static Config from_text(const std::string& text, const std::string& base_dir = ".");

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated integers, e.g. "128,96,64".
  std::vector<std::int64_t> get_int_list(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key,
                                         const std::vector<std::int64_t>& fallback) const;

  /// Keys that were set but never read through any getter; a consumer can
  /// reject these to catch typos.
  std::vector<std::string> unused_keys() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::string raw(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace voxopt
