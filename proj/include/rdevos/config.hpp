#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace rdevos {

/// Flat `key = value` configuration. Blank lines and `#` comments are
/// ignored. Getters fall back to the supplied default when a key is absent
/// and throw ConfigError when a present value does not parse.
class Config {
 public:
  static Config parse(std::istream& is);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  /// Throws ConfigError naming the first key not in `known`.
  void require_known(const std::vector<std::string>& known) const;

 private:
  std::map<std::string, std::string> entries_;
};

/// Splits "1,10,15" style lists; throws ConfigError on junk.
std::vector<int> parse_int_list(const std::string& text);
std::vector<std::string> split_list(const std::string& text, char sep = ',');

}  // namespace rdevos
