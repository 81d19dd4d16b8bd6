#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbpot/electrochem.hpp"
#include "dbpot/fidigota.hpp"

namespace dbpot::config {

namespace pt = boost::property_tree;
namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Circuit keys live at the top level of a config file.
inline const std::vector<std::string>& circuit_keys() {
  static const std::vector<std::string> keys{"vdd", "fclk", "t0", "gm", "r0", "cfi", "icm", "ion",
                                             "ip", "in", "rout", "cl", "vth_buff", "cal_p", "cal_n"};
  return keys;
}

inline const std::vector<std::string>& cell_keys() {
  static const std::vector<std::string> keys{"rp", "cp", "rs"};
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size() || !std::isfinite(v)) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + t + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(t, &used);
    if (used != t.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + t + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + t + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

/// Key-value configuration: top-level circuit keys plus `[cell]` and
/// `[experiment]` sections, `#` or `;` comments. Keys are addressed as
/// `name` (top level) or `section.name`.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in, const std::string& origin = "<stream>") {
    Config c;
    try {
      pt::read_ini(in, c.tree_);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    return c;
  }

  static Config load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    Config c = parse(in, path.string());
    c.path_ = fs::absolute(path).lexically_normal();
    return c;
  }

  const fs::path& path() const { return path_; }
  fs::path base_dir() const { return path_.empty() ? fs::current_path() : path_.parent_path(); }

  bool has(const std::string& key) const { return bool(tree_.get_optional<std::string>(pt::path(key, '.'))); }

  std::string get_string(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(pt::path(key, '.'));
    if (!v) throw ConfigError("missing config key '" + key + "'");
    return detail::trim(*v);
  }
  std::string get_string(const std::string& key, const std::string& def) const {
    return has(key) ? get_string(key) : def;
  }
  double get_double(const std::string& key) const { return detail::parse_double(key, get_string(key)); }
  double get_double(const std::string& key, double def) const { return has(key) ? get_double(key) : def; }
  long long get_int(const std::string& key) const { return detail::parse_int(key, get_string(key)); }
  long long get_int(const std::string& key, long long def) const { return has(key) ? get_int(key) : def; }
  bool get_bool(const std::string& key, bool def) const {
    return has(key) ? detail::parse_bool(key, get_string(key)) : def;
  }
  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : detail::split_list(get_string(key))) out.push_back(detail::parse_double(key, item));
    return out;
  }
  std::vector<std::string> get_strings(const std::string& key) const { return detail::split_list(get_string(key)); }

  void set(const std::string& key, const std::string& value) {
    const auto dot = key.find('.');
    if (key.empty() || key.front() == '.' || key.back() == '.' ||
        (dot != std::string::npos && key.find('.', dot + 1) != std::string::npos))
      throw ConfigError("invalid config key '" + key + "'");
    if (dot == std::string::npos) {
      auto existing = tree_.find(key);
      if (existing != tree_.not_found() && !existing->second.empty())
        throw ConfigError("config key '" + key + "' names a section");
    }
    tree_.put(pt::path(key, '.'), value);
  }

  /// Applies a `key=value` override.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not of the form key=value");
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }

  /// Rejects keys outside the allowed top-level keys and section keys.
  void check_keys(const std::set<std::string>& top, const std::set<std::string>& sections,
                  const std::set<std::string>& section_keys) const {
    for (const auto& [name, node] : tree_) {
      if (node.empty()) {
        if (!top.count(name)) throw ConfigError("unknown config key '" + name + "'");
        continue;
      }
      if (!sections.count(name)) throw ConfigError("unknown config section '[" + name + "]'");
      for (const auto& [k, v] : node) {
        const std::string full = name + "." + k;
        if (!v.empty() || !section_keys.count(full)) throw ConfigError("unknown config key '" + full + "'");
      }
    }
  }

  std::string snapshot() const {
    std::ostringstream out;
    pt::write_ini(out, tree_);
    return out.str();
  }

 private:
  pt::ptree tree_;
  fs::path path_;
};

/// Circuit parameters from top-level keys. `ip` and `in` are the drive at
/// cal = 1; `cal_p` and `cal_n` then trim them. Unset keys keep the 0.4 V
/// defaults.
inline fidigota::CircuitParams circuit_params(const Config& c, fidigota::CircuitParams base = {}) {
  auto& p = base;
  p.vdd = c.get_double("vdd", p.vdd);
  p.fclk = c.get_double("fclk", p.fclk);
  p.t0 = c.get_double("t0", p.t0);
  p.gm = c.get_double("gm", p.gm);
  p.r0 = c.get_double("r0", p.r0);
  p.cfi = c.get_double("cfi", p.cfi);
  p.icm = c.get_double("icm", p.icm);
  p.ion = c.get_double("ion", p.ion);
  p.ip = c.get_double("ip", p.ip);
  p.in = c.get_double("in", p.in);
  p.rout = c.get_double("rout", p.rout);
  p.cl = c.get_double("cl", p.cl);
  p.vth_buff = c.get_double("vth_buff", c.has("vdd") && !c.has("vth_buff") ? 0.5 * p.vdd : p.vth_buff);
  const long long cal_p = c.get_int("cal_p", p.cal_p);
  const long long cal_n = c.get_int("cal_n", p.cal_n);
  if (cal_p < 0 || cal_p >= fidigota::kCalCodes) throw ConfigError("config key 'cal_p': must be in [0, 255]");
  if (cal_n < 0 || cal_n >= fidigota::kCalCodes) throw ConfigError("config key 'cal_n': must be in [0, 255]");
  p.cal_p = 1;
  p.cal_n = 1;
  const auto bad = p.invalid_fields();
  if (!bad.empty()) {
    std::string msg = "invalid circuit parameters:";
    for (const auto& b : bad) msg += " config key '" + b + "';";
    throw ConfigError(msg);
  }
  return fidigota::trim_output_stage(p, int(cal_p), int(cal_n));
}

inline electrochem::RandlesCell cell_params(const Config& c, electrochem::RandlesCell cell = {}) {
  cell.rp = c.get_double("cell.rp", cell.rp);
  cell.cp = c.get_double("cell.cp", cell.cp);
  cell.rs = c.get_double("cell.rs", cell.rs);
  if (!(cell.rp > 0.0)) throw ConfigError("config key 'cell.rp': must be > 0");
  if (!(cell.cp > 0.0)) throw ConfigError("config key 'cell.cp': must be > 0");
  if (!(cell.rs >= 0.0)) throw ConfigError("config key 'cell.rs': must be >= 0");
  return cell;
}

}  // namespace dbpot::config
