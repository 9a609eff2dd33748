#include "s2ip/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "s2ip/errors.hpp"

namespace s2ip {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t parse_size(const std::string& s) {
  if (!s.empty() && s[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("expected a finite real number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + s + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<ConfigEntry> parse_key_values(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    if (!section.empty()) key = section + "." + key;
    out.push_back({key, unquote(trim(line.substr(eq + 1))), line_no});
  }
  return out;
}

void ConfigBinder::bind(const std::string& key, std::size_t& field) {
  bind(key, [&field] { return std::to_string(field); }, [&field](const std::string& s) { field = parse_size(s); });
}

void ConfigBinder::bind(const std::string& key, double& field) {
  bind(key, [&field] { return format_double(field); }, [&field](const std::string& s) { field = parse_double(s); });
}

void ConfigBinder::bind(const std::string& key, bool& field) {
  bind(key, [&field] { return std::string(field ? "true" : "false"); },
       [&field](const std::string& s) { field = parse_bool(s); });
}

void ConfigBinder::bind(const std::string& key, std::string& field) {
  bind(key, [&field] { return field; }, [&field](const std::string& s) { field = s; });
}

void ConfigBinder::bind(const std::string& key, std::vector<double>& field) {
  bind(key, [&field] { return join(field, format_double); },
       [&field](const std::string& s) {
         std::vector<double> v;
         for (const auto& item : split_list(s)) v.push_back(parse_double(item));
         field = std::move(v);
       });
}

void ConfigBinder::bind(const std::string& key, std::vector<std::size_t>& field) {
  bind(key, [&field] { return join(field, [](std::size_t x) { return std::to_string(x); }); },
       [&field](const std::string& s) {
         std::vector<std::size_t> v;
         for (const auto& item : split_list(s)) v.push_back(parse_size(item));
         field = std::move(v);
       });
}

void ConfigBinder::bind(const std::string& key, std::function<std::string()> get,
                        std::function<void(const std::string&)> set) {
  fields_.push_back({key, std::move(get), std::move(set)});
}

void ConfigBinder::apply_one(const std::string& key, const std::string& value) const {
  for (const auto& f : fields_) {
    if (f.key != key) continue;
    try {
      f.set(value);
    } catch (const std::invalid_argument& e) {
      throw ValidationError(key + ": " + e.what());
    }
    return;
  }
  throw ValidationError("unknown configuration key '" + key + "'");
}

void ConfigBinder::apply(const std::vector<ConfigEntry>& entries) const {
  for (const auto& e : entries) apply_one(e.key, e.value);
}

std::string ConfigBinder::serialize() const {
  std::string out;
  for (const auto& f : fields_) out += f.key + " = " + f.get() + "\n";
  return out;
}

std::vector<std::string> ConfigBinder::keys() const {
  std::vector<std::string> out;
  for (const auto& f : fields_) out.push_back(f.key);
  return out;
}

}  // namespace s2ip
