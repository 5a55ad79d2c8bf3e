#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace adt {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

// Human-readable "key = value" file. Lines starting with '#' are comments;
// keys may repeat (e.g. map rows) and keep their order.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>") {
    KeyValueConfig c;
    std::istringstream is(text);
    std::string line;
    for (std::size_t n = 1; std::getline(is, line); ++n) {
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value'");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
      c.entries_.emplace_back(key, trim(t.substr(eq + 1)));
    }
    return c;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
  }

  // Last occurrence wins, so appended overrides take precedence.
  std::string get(const std::string& key) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->first == key) return it->second;
    throw ConfigError("missing config key '" + key + "'");
  }
  std::string get(const std::string& key, const std::string& fallback) const { return has(key) ? get(key) : fallback; }

  std::vector<std::string> get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_)
      if (k == key) out.push_back(v);
    return out;
  }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? to_double(key, get(key)) : fallback;
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    return has(key) ? to_size(key, get(key)) : fallback;
  }
  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key);
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
  }

  // Keys beginning with `prefix`, e.g. "reward." -> {"e": "10"}.
  std::map<std::string, std::string> with_prefix(const std::string& prefix) const {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : entries_)
      if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
    return out;
  }

  void set(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

  // Later layers override earlier ones: defaults < file < flags.
  void merge(const KeyValueConfig& over) {
    for (const auto& e : over.entries_) entries_.push_back(e);
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  // Resolved view: one line per distinct key with its effective value, sorted.
  std::string resolved() const {
    std::map<std::string, std::string> last;
    for (const auto& [k, v] : entries_) last[k] = v;
    std::ostringstream os;
    for (const auto& [k, v] : last) os << k << " = " << v << '\n';
    return os.str();
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
  }
  static std::size_t to_size(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const unsigned long long d = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return static_cast<std::size_t>(d);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace adt
