#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace esr {

/// Flat `key=value` configuration, one pair per line, `#` starts a comment.
class KvConfig {
 public:
  static KvConfig parse(std::string_view text);
  static KvConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, std::optional<std::string> fallback = {}) const;
  std::int64_t get_int(const std::string& key, std::optional<std::int64_t> fallback = {}) const;
  double get_double(const std::string& key, std::optional<double> fallback = {}) const;
  bool get_bool(const std::string& key, std::optional<bool> fallback = {}) const;

  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace esr
