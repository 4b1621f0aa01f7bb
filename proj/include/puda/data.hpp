#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "puda/geometry.hpp"

namespace puda::data {

/// Train/val/test clouds of one domain plus its class vocabulary.
struct DomainDataset {
  std::string name;
  std::vector<std::string> class_names;
  std::size_t nominal_n = 0;
  std::vector<PointCloud> train;
  std::vector<PointCloud> val;
  std::vector<PointCloud> test;

  const std::vector<PointCloud>& split(const std::string& which) const;
  /// Checks labels against the vocabulary; throws FormatError.
  void validate() const;

  friend bool operator==(const DomainDataset&, const DomainDataset&) = default;
};

/// Copies of the clouds with their labels removed, for unlabeled use.
std::vector<PointCloud> unlabeled(std::span<const PointCloud> clouds);

/// Knobs for one synthetic domain.
struct SyntheticSpec {
  std::string name = "clean";
  std::vector<std::string> classes{"sphere", "cube",    "cylinder", "cone",
                                   "torus",  "pyramid", "ellipsoid", "capsule"};
  std::size_t n_points = 256;
  double noise_sigma = 0.0;
  double crop_retain = 1.0;   // 1 disables cropping
  double density_bias = 0.0;  // 0 = uniform over the surface, 1 = fully ramped
  double scale_jitter = 0.0;  // per-axis scale drawn from 1 +- scale_jitter
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 20;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
};

/// Shape names gen_synthetic_domain understands.
std::span<const std::string_view> known_shapes();

/// Area-uniform samples of one analytic surface, before any noise,
/// scaling or normalization.
std::vector<Point3> sample_shape(const std::string& shape, std::size_t n, Rng& rng);

/// Samples with acceptance weighted by a random linear ramp over the
/// surface; density_bias = 0 reproduces sample_shape.
std::vector<Point3> sample_shape_biased(const std::string& shape, std::size_t n,
                                        double density_bias, Rng& rng);

/// One synthetic cloud: sample, scale jitter, noise, crop, normalize.
PointCloud synth_cloud(const SyntheticSpec& spec, std::size_t class_index, Rng& rng);

/// Whole domain; every cloud is derived from (spec.seed, split, class,
/// index) so generation order does not matter.
DomainDataset gen_synthetic_domain(const SyntheticSpec& spec);

/// Stratified, seed-deterministic split. Per class floor(fraction * count)
/// go to train, the rest to val; relative order is preserved.
std::pair<std::vector<PointCloud>, std::vector<PointCloud>> split_train_val(
    std::span<const PointCloud> clouds, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

/// One "x y z" line per point with 17 significant digits.
void write_xyz(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_xyz(const std::filesystem::path& path);
PointCloud parse_xyz(const std::string& text, const std::string& origin = "<text>");
std::string format_xyz(const PointCloud& cloud);

/// Directory form: manifest.json plus one .xyz file per cloud.
void write_dataset(const std::filesystem::path& dir, const DomainDataset& ds);
DomainDataset read_dataset(const std::filesystem::path& dir);

/// Packed single-file form ("PCDS").
void write_packed(const std::filesystem::path& file, const DomainDataset& ds);
DomainDataset read_packed(const std::filesystem::path& file);

/// Reads either form depending on whether `path` is a directory.
DomainDataset load_dataset(const std::filesystem::path& path);

/// Git-style content hash: SHA-1 over "<blob sha1> <relative path>\n"
/// lines, where each blob hash covers "blob <size>\0<content>". A plain
/// file hashes as a one-entry tree.
std::string dataset_hash(const std::filesystem::path& path);

std::string sha1_hex(std::string_view bytes);

}  // namespace puda::data
