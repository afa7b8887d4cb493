#pragma once

// Plain-text run configuration: one "section.key = value" per line, '#'
// comments, later assignments win.  Command-line overrides reuse the same
// "section.key=value" syntax.

#include <fstream>
#include <map>
#include <sstream>

#include "core.hpp"

namespace sunet {

struct Config {
  std::map<std::string, std::string> kv;

  static Config parse_line(Config cfg, const std::string& line, const std::string& where) {
    cfg.set_line(line, where);
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { kv[key] = value; }

  void set_line(std::string line, const std::string& where) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) return;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw data_error("config: missing '=' at " + where);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw data_error("config: empty key at " + where);
    kv[key] = val;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("config: cannot open " + path);
    Config cfg;
    std::string line;
    int ln = 0;
    while (std::getline(f, line)) cfg.set_line(line, path + ":" + std::to_string(++ln));
    return cfg;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw data_error("config: cannot create " + path);
    for (const auto& [k, v] : kv) f << k << " = " << v << "\n";
  }

  bool has(const std::string& key) const { return kv.count(key) != 0; }

  std::string str(const std::string& key, const std::string& def) const {
    const auto it = kv.find(key);
    return it == kv.end() ? def : it->second;
  }

  int64_t integer(const std::string& key, int64_t def) const {
    const auto it = kv.find(key);
    if (it == kv.end()) return def;
    try {
      size_t pos = 0;
      const int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw data_error("config: '" + key + "' is not an integer: " + it->second);
    }
  }

  double real(const std::string& key, double def) const {
    const auto it = kv.find(key);
    if (it == kv.end()) return def;
    try {
      size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw data_error("config: '" + key + "' is not a number: " + it->second);
    }
  }

  bool boolean(const std::string& key, bool def) const {
    const auto it = kv.find(key);
    if (it == kv.end()) return def;
    const std::string& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw data_error("config: '" + key + "' is not a boolean: " + s);
  }
};

}  // namespace sunet
