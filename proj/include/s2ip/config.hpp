#pragma once

// Plain-text `key = value` configuration with dotted keys.
//
//   # comment
//   model.prompt_k = 4
//   [train]            <- optional section header, prefixes following keys
//   epochs = 50
//
// Binding is strict: unknown keys and malformed values are rejected with the
// full key in the message.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace s2ip {

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

std::vector<ConfigEntry> parse_key_values(const std::string& text);

class ConfigBinder {
 public:
  void bind(const std::string& key, std::size_t& field);
  void bind(const std::string& key, double& field);
  void bind(const std::string& key, bool& field);
  void bind(const std::string& key, std::string& field);
  void bind(const std::string& key, std::vector<double>& field);
  void bind(const std::string& key, std::vector<std::size_t>& field);
  // Custom representation; `set` throws std::invalid_argument on bad input.
  void bind(const std::string& key, std::function<std::string()> get, std::function<void(const std::string&)> set);

  void apply(const std::vector<ConfigEntry>& entries) const;
  void apply_one(const std::string& key, const std::string& value) const;
  // One `key = value` line per bound field, in binding order.
  std::string serialize() const;
  std::vector<std::string> keys() const;

 private:
  struct Field {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };
  std::vector<Field> fields_;
};

std::string format_double(double v);

}  // namespace s2ip
