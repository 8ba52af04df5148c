#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "difflab/numerics.hpp"

namespace difflab {

// Raised for malformed or inconsistent configuration; the CLI maps it to
// exit code 2.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Minimal TOML subset: [tables], key = value with numbers, booleans,
// double-quoted strings and (possibly nested, possibly multiline) arrays.
// Comments start with '#'.
class TomlValue {
 public:
  using Array = std::vector<TomlValue>;
  using Storage = std::variant<double, bool, std::string, Array>;

  TomlValue() : v_(0.0) {}
  explicit TomlValue(Storage v) : v_(std::move(v)) {}

  bool is_number() const { return std::holds_alternative<double>(v_); }
  bool is_bool() const { return std::holds_alternative<bool>(v_); }
  bool is_string() const { return std::holds_alternative<std::string>(v_); }
  bool is_array() const { return std::holds_alternative<Array>(v_); }

  double as_number() const {
    if (!is_number()) throw config_error("expected a number");
    return std::get<double>(v_);
  }
  long as_int() const {
    const double d = as_number();
    const long i = static_cast<long>(std::llround(d));
    if (std::abs(d - static_cast<double>(i)) > 1e-9)
      throw config_error("expected an integer");
    return i;
  }
  bool as_bool() const {
    if (!is_bool()) throw config_error("expected a boolean");
    return std::get<bool>(v_);
  }
  const std::string& as_string() const {
    if (!is_string()) throw config_error("expected a string");
    return std::get<std::string>(v_);
  }
  const Array& as_array() const {
    if (!is_array()) throw config_error("expected an array");
    return std::get<Array>(v_);
  }

  std::vector<double> as_number_list() const {
    std::vector<double> out;
    for (const TomlValue& v : as_array()) out.push_back(v.as_number());
    return out;
  }

  // array of arrays -> matrix (rows must agree); flat array -> column
  Mat as_matrix() const {
    const Array& rows = as_array();
    if (rows.empty()) throw config_error("empty array where points expected");
    if (rows.front().is_number()) {
      Mat m(static_cast<Eigen::Index>(rows.size()), 1);
      for (std::size_t i = 0; i < rows.size(); ++i)
        m(static_cast<Eigen::Index>(i), 0) = rows[i].as_number();
      return m;
    }
    const std::size_t cols = rows.front().as_array().size();
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Array& row = rows[i].as_array();
      if (row.size() != cols) throw config_error("ragged point list");
      for (std::size_t j = 0; j < cols; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j].as_number();
    }
    return m;
  }

 private:
  Storage v_;
};

class TomlTable {
 public:
  static TomlTable parse(const std::string& text) {
    TomlTable table;
    std::string pending;
    std::string section;
    int line_no = 0;
    int depth = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      strip_comment(line);
      pending += line;
      depth = bracket_depth(pending);
      if (depth > 0) {
        pending += ' ';
        continue;  // multiline array
      }
      const std::string stmt = trim(pending);
      pending.clear();
      if (stmt.empty()) continue;
      if (stmt.front() == '[') {
        if (stmt.back() != ']')
          throw config_error("line " + std::to_string(line_no) + ": malformed table header");
        section = trim(stmt.substr(1, stmt.size() - 2));
        continue;
      }
      const std::size_t eq = stmt.find('=');
      if (eq == std::string::npos)
        throw config_error("line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(stmt.substr(0, eq));
      std::size_t pos = 0;
      const std::string value_text = trim(stmt.substr(eq + 1));
      const TomlValue value = parse_value(value_text, pos, line_no);
      if (trim(value_text.substr(pos)).size())
        throw config_error("line " + std::to_string(line_no) + ": trailing characters");
      table.values_[section][key] = value;
    }
    if (!trim(pending).empty()) throw config_error("unterminated array at end of file");
    return table;
  }

  static TomlTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    return s != values_.end() && s->second.count(key) > 0;
  }

  const TomlValue& get(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    if (s == values_.end() || !s->second.count(key))
      throw config_error("missing config key [" + section + "] " + key);
    return s->second.at(key);
  }

  double number(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get(section, key).as_number() : fallback;
  }
  long integer(const std::string& section, const std::string& key, long fallback) const {
    return has(section, key) ? get(section, key).as_int() : fallback;
  }
  std::string text(const std::string& section, const std::string& key,
                   const std::string& fallback) const {
    return has(section, key) ? get(section, key).as_string() : fallback;
  }
  bool flag(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get(section, key).as_bool() : fallback;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  static void strip_comment(std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.erase(i);
        return;
      }
    }
  }

  static int bracket_depth(const std::string& s) {
    int depth = 0;
    bool quoted = false;
    for (char c : s) {
      if (c == '"') quoted = !quoted;
      if (quoted) continue;
      if (c == '[') ++depth;
      if (c == ']') --depth;
    }
    return depth;
  }

  static void skip_ws(const std::string& s, std::size_t& pos) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  }

  static TomlValue parse_value(const std::string& s, std::size_t& pos, int line_no) {
    skip_ws(s, pos);
    if (pos >= s.size())
      throw config_error("line " + std::to_string(line_no) + ": missing value");
    const char c = s[pos];
    if (c == '"') {
      const std::size_t end = s.find('"', pos + 1);
      if (end == std::string::npos)
        throw config_error("line " + std::to_string(line_no) + ": unterminated string");
      std::string out = s.substr(pos + 1, end - pos - 1);
      pos = end + 1;
      return TomlValue(TomlValue::Storage(std::move(out)));
    }
    if (c == '[') {
      ++pos;
      TomlValue::Array arr;
      skip_ws(s, pos);
      while (pos < s.size() && s[pos] != ']') {
        arr.push_back(parse_value(s, pos, line_no));
        skip_ws(s, pos);
        if (pos < s.size() && s[pos] == ',') {
          ++pos;
          skip_ws(s, pos);
        }
      }
      if (pos >= s.size())
        throw config_error("line " + std::to_string(line_no) + ": unterminated array");
      ++pos;  // ']'
      return TomlValue(TomlValue::Storage(std::move(arr)));
    }
    if (s.compare(pos, 4, "true") == 0) {
      pos += 4;
      return TomlValue(TomlValue::Storage(true));
    }
    if (s.compare(pos, 5, "false") == 0) {
      pos += 5;
      return TomlValue(TomlValue::Storage(false));
    }
    if (s.compare(pos, 3, "inf") == 0) {
      pos += 3;
      return TomlValue(TomlValue::Storage(std::numeric_limits<double>::infinity()));
    }
    char* end = nullptr;
    const double d = std::strtod(s.c_str() + pos, &end);
    if (end == s.c_str() + pos)
      throw config_error("line " + std::to_string(line_no) + ": cannot parse value '" +
                         s.substr(pos) + "'");
    pos = static_cast<std::size_t>(end - s.c_str());
    return TomlValue(TomlValue::Storage(d));
  }

  std::map<std::string, std::map<std::string, TomlValue>> values_;
};

}  // namespace difflab
