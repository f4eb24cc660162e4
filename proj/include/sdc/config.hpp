#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/image_io.hpp"

namespace sdc {

// INI-style key=value document with [section] headers, '#' or ';' comments.
// Unknown sections/keys are rejected against a schema before any work runs.
class Config {
 public:
  static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto cut = line.find_first_of("#;");
      if (cut != std::string::npos) line = line.substr(0, cut);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') fail_argument(origin + " line " + std::to_string(lineno) + ": unterminated section");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) fail_argument(origin + " line " + std::to_string(lineno) + ": empty section name");
        c.values_[section];  // record the section even if empty
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos)
        fail_argument(origin + " line " + std::to_string(lineno) + ": expected key=value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) fail_argument(origin + " line " + std::to_string(lineno) + ": empty key");
      if (section.empty()) fail_argument(origin + " line " + std::to_string(lineno) + ": key outside any section");
      c.values_[section][key] = value;
    }
    return c;
  }

  static Config parse_file(const std::string& path) {
    auto buf = detail::read_file(path);
    return parse_string(std::string(buf.begin(), buf.end()), path);
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    return s != values_.end() && s->second.count(key) > 0;
  }

  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const {
    auto s = values_.find(section);
    if (s == values_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    try {
      std::size_t used = 0;
      double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (...) {
      fail_argument("config [" + section + "] " + key + ": '" + v + "' is not a number");
    }
  }

  long get_int(const std::string& section, const std::string& key, long fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    try {
      std::size_t used = 0;
      long d = std::stol(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (...) {
      fail_argument("config [" + section + "] " + key + ": '" + v + "' is not an integer");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    fail_argument("config [" + section + "] " + key + ": '" + v + "' is not a boolean");
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      const std::vector<double>& fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    std::vector<double> out;
    std::istringstream in(v);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      try {
        out.push_back(std::stod(tok));
      } catch (...) {
        fail_argument("config [" + section + "] " + key + ": '" + tok + "' is not a number");
      }
    }
    if (out.empty()) fail_argument("config [" + section + "] " + key + ": empty list");
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    values_[section][key] = value;
  }

  // Rejects sections and keys that are not in the schema.
  void validate_known(const std::map<std::string, std::set<std::string>>& schema) const {
    for (const auto& [section, keys] : values_) {
      auto s = schema.find(section);
      if (s == schema.end()) fail_argument("config: unknown section [" + section + "]");
      for (const auto& [key, value] : keys)
        if (!s->second.count(key)) fail_argument("config: unknown key '" + key + "' in section [" + section + "]");
    }
  }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& [section, keys] : values_) {
      os << "[" << section << "]\n";
      for (const auto& [key, value] : keys) os << key << " = " << value << "\n";
      os << "\n";
    }
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace sdc
