#pragma once

// Flat `key = value` configuration text; `#` starts a comment.

#include <mps/error.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>

namespace mps::config {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw Error(ErrorKind::BadConfig, "line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw Error(ErrorKind::BadConfig, "line " + std::to_string(lineno) + ": empty key");
      if (kv.values_.contains(key))
        throw Error(ErrorKind::BadConfig, "line " + std::to_string(lineno) + ": duplicate key " + key);
      kv.values_[key] = value;
    }
    return kv;
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  const std::string& raw(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw Error(ErrorKind::BadConfig, "missing required key: " + key);
    return it->second;
  }

  double number(const std::string& key) const {
    const std::string& s = raw(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
      throw Error(ErrorKind::BadConfig, "key " + key + ": not a number: " + s);
    return v;
  }

  long long integer(const std::string& key) const {
    const std::string& s = raw(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw Error(ErrorKind::BadConfig, "key " + key + ": not an integer: " + s);
    return v;
  }

  bool boolean(const std::string& key) const {
    const std::string& s = raw(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw Error(ErrorKind::BadConfig, "key " + key + ": not a boolean: " + s);
  }

  template <class T>
  T get_or(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    if constexpr (std::is_same_v<T, bool>) {
      return boolean(key);
    } else if constexpr (std::is_integral_v<T>) {
      return static_cast<T>(integer(key));
    } else if constexpr (std::is_floating_point_v<T>) {
      return static_cast<T>(number(key));
    } else {
      return raw(key);
    }
  }

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mps::config
