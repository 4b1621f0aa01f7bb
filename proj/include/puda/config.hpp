#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "puda/data.hpp"
#include "puda/uda.hpp"

namespace puda::config {

/// Flat `key = value` settings with a fixed key set. Lines starting with
/// '#' and blank lines are ignored; unknown keys raise ConfigError.
class FlatConfig {
 public:
  explicit FlatConfig(std::map<std::string, std::string> defaults);

  void set(const std::string& key, const std::string& value);
  void parse(const std::string& text, const std::string& origin = "<text>");
  void load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::size_t> get_sizes(const std::string& key) const;

  /// Sorted `key = value` lines; parse(dump()) reproduces the config.
  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Keys for training runs, with the reference defaults.
FlatConfig train_schema();
/// Applies a training config; throws ConfigError on malformed values.
uda::TrainConfig to_train_config(const FlatConfig& cfg);
/// Inverse of to_train_config.
FlatConfig from_train_config(const uda::TrainConfig& tc);

/// Keys for synthetic data generation: shared `gen.*` keys plus
/// `source.*` and `target.*` domain shifts.
FlatConfig gen_schema();
std::pair<data::SyntheticSpec, data::SyntheticSpec> to_gen_specs(const FlatConfig& cfg);

}  // namespace puda::config
