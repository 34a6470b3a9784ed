#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "fairnav/learn.hpp"

namespace fairnav {

/// Flat `section.key = value` text. `#` starts a comment; blank lines are
/// ignored; later assignments override earlier ones.
class ConfigMap {
 public:
  static ConfigMap parse(std::istream& is, const std::string& source = "<config>");
  static ConfigMap load(const std::string& path);

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seed used when neither the config nor the command line sets one:
/// FAIRNAV_SEED when present, otherwise 1.
std::uint64_t default_seed();

/// Applies every key over the built-in defaults. Unknown keys and malformed
/// values raise ConfigError naming the key.
PipelineConfig pipeline_config(const ConfigMap& map);

/// Every key with its current value, in a form `pipeline_config` reads back.
std::string dump_config(const PipelineConfig& config);

bool parse_bool(std::string_view text);

}  // namespace fairnav
