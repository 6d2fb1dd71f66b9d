#pragma once

#include <charconv>
#include <cstdio>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ftss/errors.hpp"

namespace ftss {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Round-trips exactly through parse_double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view key, std::string_view v) {
  const std::string s(trim(v));
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("key '" + std::string(key) + "': '" + s + "' is not a number");
  }
  return d;
}

inline std::size_t parse_size(std::string_view key, std::string_view v) {
  const std::string_view s = trim(v);
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("key '" + std::string(key) + "': '" + std::string(s) +
                      "' is not a non-negative integer");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  const std::string_view s = trim(v);
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError("key '" + std::string(key) + "': '" + std::string(s) + "' is not a boolean");
}

// key=value lines; blank lines and '#' comments skipped. Errors carry the
// 1-based line number.
inline KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError("expected key=value, got '" + std::string(line) + "'", line_no);
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", line_no);
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

}  // namespace ftss
