#include "puda/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "puda/errors.hpp"

namespace puda::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || p != end) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

}  // namespace

FlatConfig::FlatConfig(std::map<std::string, std::string> defaults)
    : values_(std::move(defaults)) {}

void FlatConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void FlatConfig::parse(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!has(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    set(key, trim(t.substr(eq + 1)));
  }
}

void FlatConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  parse(ss.str(), path.string());
}

const std::string& FlatConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double FlatConfig::get_double(const std::string& key) const {
  const auto& v = get(key);
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || p != end || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

std::size_t FlatConfig::get_size(const std::string& key) const {
  return parse_int<std::size_t>(key, get(key));
}

std::uint64_t FlatConfig::get_u64(const std::string& key) const {
  return parse_int<std::uint64_t>(key, get(key));
}

bool FlatConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> FlatConfig::get_sizes(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(get(key))) out.push_back(parse_int<std::size_t>(key, item));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

std::string FlatConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------

FlatConfig from_train_config(const uda::TrainConfig& tc) {
  std::map<std::string, std::string> m;
  m["train.batch_size"] = std::to_string(tc.batch_size);
  m["train.epochs"] = std::to_string(tc.epochs);
  m["train.lr"] = fmt_double(tc.lr);
  m["train.weight_decay"] = fmt_double(tc.weight_decay);
  m["train.early_stop_patience"] = tc.early_stop_patience == uda::kNoEarlyStop
                                       ? "none"
                                       : std::to_string(tc.early_stop_patience);
  m["train.seed"] = std::to_string(tc.seed);
  m["train.aux_weight"] = fmt_double(tc.aux_weight);
  m["train.eval_batch"] = std::to_string(tc.eval_batch);
  m["ssl.task"] = uda::to_string(tc.ssl_task);
  m["ssl.alpha"] = fmt_double(tc.alpha);
  m["ssl.lambda1"] = fmt_double(tc.lambda1);
  m["ssl.lambda2"] = fmt_double(tc.lambda2);
  m["ssl.variants"] = std::to_string(tc.variants);
  m["ssl.multi_region"] = fmt_bool(tc.multi_region);
  m["ssl.region_fraction"] = fmt_double(tc.region_fraction);
  m["ssl.detach_recon_from_transform"] = fmt_bool(tc.detach_recon_from_transform);
  m["ssl.aux_updates_bn_stats"] = fmt_bool(tc.aux_updates_bn_stats);
  m["augment.rotate"] = fmt_bool(tc.augment.rotate);
  m["augment.jitter"] = fmt_bool(tc.augment.jitter);
  m["augment.jitter_sigma"] = fmt_double(tc.augment.jitter_sigma);
  m["augment.jitter_clip"] = fmt_double(tc.augment.jitter_clip);
  m["crop.source"] = fmt_bool(tc.crop_source);
  m["crop.retain"] = fmt_double(tc.crop_retain);
  m["aug_mode.enabled"] = fmt_bool(tc.aug_mode);
  m["aug_mode.probability"] = fmt_double(tc.aug_probability);
  m["aug_mode.phase1_epochs"] = std::to_string(tc.aug_phase1_epochs);
  m["model.encoder_widths"] = fmt_sizes(tc.network.encoder_widths);
  m["model.transform_point_widths"] = fmt_sizes(tc.network.transform_point_widths);
  m["model.transform_out_widths"] = fmt_sizes(tc.network.transform_out_widths);
  m["model.main_hidden"] = fmt_sizes(tc.network.main_hidden);
  m["model.recon_hidden"] = fmt_sizes(tc.network.recon_hidden);
  m["model.rotation_hidden"] = fmt_sizes(tc.network.rotation_hidden);
  return FlatConfig(std::move(m));
}

FlatConfig train_schema() { return from_train_config(uda::TrainConfig{}); }

uda::TrainConfig to_train_config(const FlatConfig& c) {
  uda::TrainConfig tc;
  tc.batch_size = c.get_size("train.batch_size");
  tc.epochs = c.get_size("train.epochs");
  tc.lr = c.get_double("train.lr");
  tc.weight_decay = c.get_double("train.weight_decay");
  const auto& patience = c.get("train.early_stop_patience");
  tc.early_stop_patience =
      patience == "none" ? uda::kNoEarlyStop : c.get_size("train.early_stop_patience");
  tc.seed = c.get_u64("train.seed");
  tc.aux_weight = c.get_double("train.aux_weight");
  tc.eval_batch = c.get_size("train.eval_batch");
  tc.ssl_task = uda::parse_ssl_task(c.get("ssl.task"));
  tc.alpha = c.get_double("ssl.alpha");
  tc.lambda1 = c.get_double("ssl.lambda1");
  tc.lambda2 = c.get_double("ssl.lambda2");
  tc.variants = c.get_size("ssl.variants");
  tc.multi_region = c.get_bool("ssl.multi_region");
  tc.region_fraction = c.get_double("ssl.region_fraction");
  tc.detach_recon_from_transform = c.get_bool("ssl.detach_recon_from_transform");
  tc.aux_updates_bn_stats = c.get_bool("ssl.aux_updates_bn_stats");
  tc.augment.rotate = c.get_bool("augment.rotate");
  tc.augment.jitter = c.get_bool("augment.jitter");
  tc.augment.jitter_sigma = c.get_double("augment.jitter_sigma");
  tc.augment.jitter_clip = c.get_double("augment.jitter_clip");
  tc.crop_source = c.get_bool("crop.source");
  tc.crop_retain = c.get_double("crop.retain");
  tc.aug_mode = c.get_bool("aug_mode.enabled");
  tc.aug_probability = c.get_double("aug_mode.probability");
  tc.aug_phase1_epochs = c.get_size("aug_mode.phase1_epochs");
  tc.network.encoder_widths = c.get_sizes("model.encoder_widths");
  tc.network.transform_point_widths = c.get_sizes("model.transform_point_widths");
  tc.network.transform_out_widths = c.get_sizes("model.transform_out_widths");
  tc.network.main_hidden = c.get_sizes("model.main_hidden");
  tc.network.recon_hidden = c.get_sizes("model.recon_hidden");
  tc.network.rotation_hidden = c.get_sizes("model.rotation_hidden");
  tc.validate();
  return tc;
}

// ---------------------------------------------------------------------------

namespace {

data::SyntheticSpec domain_spec(const FlatConfig& c, const std::string& prefix) {
  data::SyntheticSpec s;
  s.classes = split_list(c.get("gen.classes"));
  s.n_points = c.get_size("gen.n_points");
  s.train_per_class = c.get_size("gen.train_per_class");
  s.test_per_class = c.get_size("gen.test_per_class");
  s.val_fraction = c.get_double("gen.val_fraction");
  // Each domain draws its own clouds from one shared base seed.
  s.seed = Rng(c.get_u64("gen.seed")).child(prefix == "source" ? 0 : 1).seed_material();
  s.name = c.get(prefix + ".name");
  s.noise_sigma = c.get_double(prefix + ".noise_sigma");
  s.crop_retain = c.get_double(prefix + ".crop_retain");
  s.density_bias = c.get_double(prefix + ".density_bias");
  s.scale_jitter = c.get_double(prefix + ".scale_jitter");

  if (s.classes.size() < 2) throw ConfigError("gen.classes: need at least two classes");
  for (const auto& name : s.classes) {
    bool known = false;
    for (auto k : data::known_shapes()) known = known || k == name;
    if (!known) throw ConfigError("gen.classes: unknown class name '" + name + "'");
  }
  if (s.n_points < 2) throw ConfigError("gen.n_points: need at least two points");
  if (s.train_per_class < 2) throw ConfigError("gen.train_per_class: need at least two");
  if (s.test_per_class < 1) throw ConfigError("gen.test_per_class: need at least one");
  if (!(s.val_fraction > 0.0 && s.val_fraction < 1.0)) {
    throw ConfigError("gen.val_fraction: must lie in (0,1)");
  }
  if (s.noise_sigma < 0.0) throw ConfigError(prefix + ".noise_sigma: must be non-negative");
  if (!(s.crop_retain > 0.0 && s.crop_retain <= 1.0)) {
    throw ConfigError(prefix + ".crop_retain: must lie in (0,1]");
  }
  if (s.density_bias < 0.0 || s.density_bias > 1.0) {
    throw ConfigError(prefix + ".density_bias: must lie in [0,1]");
  }
  if (s.scale_jitter < 0.0 || s.scale_jitter >= 1.0) {
    throw ConfigError(prefix + ".scale_jitter: must lie in [0,1)");
  }
  if (s.name.empty()) throw ConfigError(prefix + ".name: must not be empty");
  return s;
}

}  // namespace

FlatConfig gen_schema() {
  const data::SyntheticSpec d;
  std::map<std::string, std::string> m;
  std::string classes;
  for (std::size_t i = 0; i < d.classes.size(); ++i) classes += (i ? "," : "") + d.classes[i];
  m["gen.classes"] = classes;
  m["gen.n_points"] = std::to_string(d.n_points);
  m["gen.train_per_class"] = std::to_string(d.train_per_class);
  m["gen.test_per_class"] = std::to_string(d.test_per_class);
  m["gen.val_fraction"] = fmt_double(d.val_fraction);
  m["gen.seed"] = std::to_string(d.seed);
  m["source.name"] = "clean";
  m["source.noise_sigma"] = "0";
  m["source.crop_retain"] = "1";
  m["source.density_bias"] = "0";
  m["source.scale_jitter"] = "0";
  m["target.name"] = "scan_like";
  m["target.noise_sigma"] = "0.03";
  m["target.crop_retain"] = "0.7";
  m["target.density_bias"] = "0.8";
  m["target.scale_jitter"] = "0.15";
  return FlatConfig(std::move(m));
}

std::pair<data::SyntheticSpec, data::SyntheticSpec> to_gen_specs(const FlatConfig& c) {
  return {domain_spec(c, "source"), domain_spec(c, "target")};
}

}  // namespace puda::config
