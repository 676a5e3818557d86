#pragma once

// Plain-text key = value configuration. '#' starts a comment, blank lines are
// skipped, duplicate keys are rejected. Typed getters record which keys were
// consumed so a caller can reject unknown ones after construction.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mmn/errors.hpp"

namespace mmn {

class Config {
 public:
  Config() = default;

  static Config from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path.string());
  }

  static Config from_text(std::string_view text, const std::string& origin = "<text>") {
    Config cfg;
    cfg.origin_ = origin;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t nl = text.find('\n', start);
      std::string_view line = text.substr(
          start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
      start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;

      const std::size_t hash = line.find('#');
      if (hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;

      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      }
      const std::string key(trim(line.substr(0, eq)));
      const std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      if (!cfg.values_.emplace(key, value).second) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                          key + "'");
      }
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
      throw ConfigError(origin_ + ": missing required key '" + key + "'");
    }
    consumed_.insert(key);
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) { consumed_.insert(key); return fallback; }
    return get_double(key);
  }

  std::int64_t get_int(const std::string& key) const { return to_int(key, get_string(key)); }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    if (!has(key)) { consumed_.insert(key); return fallback; }
    return get_int(key);
  }

  std::size_t get_size(const std::string& key) const {
    const std::int64_t v = get_int(key);
    if (v < 0) throw ConfigError(origin_ + ": key '" + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) { consumed_.insert(key); return fallback; }
    return get_size(key);
  }

  std::uint64_t get_uint64(const std::string& key) const {
    const std::string s = get_string(key);
    try {
      std::size_t pos = 0;
      const std::uint64_t v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' is not an unsigned integer: '" +
                        s + "'");
    }
  }
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) { consumed_.insert(key); return fallback; }
    return get_uint64(key);
  }

  bool get_bool(const std::string& key) const {
    const std::string s = get_string(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(origin_ + ": key '" + key + "' must be true/false, got '" + s + "'");
  }
  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) { consumed_.insert(key); return fallback; }
    return get_bool(key);
  }

  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_commas(get_string(key))) {
      out.push_back(to_double(key, item));
    }
    return out;
  }

  std::vector<std::size_t> get_size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split_commas(get_string(key))) {
      const std::int64_t v = to_int(key, item);
      if (v < 0) throw ConfigError(origin_ + ": key '" + key + "' entries must be >= 0");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  // Rejects keys that no getter touched; catches typos in config files.
  void reject_unknown_keys() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_) {
      if (consumed_.count(k) == 0) unknown.push_back(k);
    }
    if (!unknown.empty()) {
      std::string msg = origin_ + ": unknown key(s):";
      for (const auto& k : unknown) msg += " '" + k + "'";
      throw ConfigError(msg);
    }
  }

  const std::string& origin() const { return origin_; }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
      s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
      s.remove_suffix(1);
    }
    return s;
  }

  static std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
      const std::size_t comma = s.find(',', start);
      const std::string_view item =
          std::string_view(s).substr(start, comma == std::string::npos
                                                ? std::string_view::npos
                                                : comma - start);
      out.emplace_back(trim(item));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }

  double to_double(const std::string& key, const std::string& s) const {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" + s + "'");
    }
  }

  std::int64_t to_int(const std::string& key, const std::string& s) const {
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + s + "'");
    }
  }

  std::string origin_ = "<empty>";
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace mmn
