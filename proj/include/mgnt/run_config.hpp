#pragma once

#include "mgnt/metrics.hpp"
#include "mgnt/model.hpp"
#include "mgnt/synthetic.hpp"
#include "mgnt/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mgnt {

/// One documented configuration key. `provenance` is "paper" when the
/// default is taken from the reference architecture, "default" otherwise.
struct ConfigKey {
  std::string key;
  std::string value;
  std::string provenance;
  std::string doc;
};

const std::vector<ConfigKey>& config_schema();

/// Resolved `key = value` configuration. Lines starting with '#' and blank
/// lines are ignored; unknown keys and malformed values raise ConfigError.
class RunConfig {
 public:
  RunConfig();

  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  Index integer(const std::string& key) const;
  std::uint64_t seed() const;

  /// Every key with its resolved value and provenance comment.
  std::string dump() const;
  /// Writes dump() to dir/config.resolved.txt.
  void echo(const std::filesystem::path& dir) const;

  OracleConfig oracle() const;
  ChainConfig chain() const;
  GraphOptions graph() const;
  ModelConfig model(const FeatureDims& dims) const;
  TrainConfig train() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> overridden_;
};

}  // namespace mgnt
