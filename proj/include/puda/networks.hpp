#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "puda/geometry.hpp"
#include "puda/ops.hpp"
#include "puda/rng.hpp"

namespace puda::nn {

using ad::Mode;

/// Layer widths of every sub-network. Defaults are the full-size model;
/// tests shrink them for finite-difference checks.
struct NetworkConfig {
  std::vector<std::size_t> encoder_widths{64, 64, 64, 128, 1024};
  std::vector<std::size_t> transform_point_widths{64, 128, 256};
  std::vector<std::size_t> transform_out_widths{256, 128};
  std::vector<std::size_t> main_hidden{512, 256};
  std::vector<std::size_t> recon_hidden{1024};
  std::vector<std::size_t> rotation_hidden{512, 256};
  std::size_t num_classes = 10;
  std::size_t recon_points = 1024;

  std::size_t feature_width() const { return encoder_widths.back(); }
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Fully connected layer, optionally followed by batch norm and ReLU.
struct Dense {
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, bool norm_act, Rng& rng);

  ad::Parameter weight;
  ad::Parameter bias;
  bool norm_act = false;
  ad::Parameter gamma;
  ad::Parameter beta;
  ad::BatchNormState bn;

  std::size_t in_width() const { return weight.value.dim(0); }
  std::size_t out_width() const { return weight.value.dim(1); }
};

/// Stack of Dense layers sharing one freeze flag.
struct Mlp {
  std::string name;
  std::vector<Dense> layers;
  /// Frozen stacks enter the tape as constants: gradients still flow
  /// through their activations, but never into their weights.
  bool frozen = false;

  ad::Var forward(ad::Tape& tape, ad::Var x, Mode mode);
  std::vector<ad::Parameter*> parameters();
};

Mlp make_mlp(const std::string& name, std::size_t in, std::span<const std::size_t> widths,
             bool last_norm_act, Rng& rng);

/// Ragged batch of clouds stacked row-wise into one [N,3] tensor.
struct CloudBatch {
  ad::Tensor points;
  std::vector<std::size_t> offsets;  // count()+1 entries

  static CloudBatch from(std::span<const PointCloud> clouds);
  static CloudBatch from(std::span<const PointCloud* const> clouds);
  std::size_t count() const { return offsets.size() - 1; }
  /// Row index -> owning cloud.
  std::vector<std::size_t> row_owner() const;
};

/// Shared PointNet-style encoder: per-point MLP then max-pool.
struct Encoder {
  Mlp mlp;
  /// [N,3] stacked points -> [clouds, feature_width].
  ad::Var forward(ad::Tape& tape, ad::Var points, std::span<const std::size_t> offsets,
                  Mode mode);
};

/// Per-point displacement network with a global-feature skip connection.
struct TransformNet {
  Mlp point_mlp;
  Mlp out_mlp;  // last layer is linear, 3 outputs
  bool frozen() const { return point_mlp.frozen; }
  void set_frozen(bool f) { point_mlp.frozen = out_mlp.frozen = f; }

  /// [N,3] stacked points -> [N,3] displacements.
  ad::Var forward(ad::Tape& tape, ad::Var points, std::span<const std::size_t> offsets,
                  Mode mode);
};

enum class Group : std::uint8_t { encoder, main_head, recon_head, rotation_head, transform };

/// Every network of the framework plus the class vocabulary.
struct Model {
  Model() = default;
  Model(const NetworkConfig& cfg, std::uint64_t seed);

  NetworkConfig config;
  std::vector<std::string> class_names;
  Encoder encoder;
  Mlp main_head;
  Mlp recon_head;
  Mlp rotation_head;
  TransformNet transform;

  std::vector<ad::Parameter*> parameters(std::span<const Group> groups);
  std::vector<ad::Parameter*> all_parameters();

  /// Visits every persisted tensor (parameters, BN running stats, ADAM
  /// moments) under its checkpoint name.
  void visit_state(const std::function<void(const std::string&, ad::Tensor&)>& fn);
};

/// [clouds, feature] -> [clouds, num_classes] logits.
ad::Var classify_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode);
/// [clouds, feature] -> [clouds, recon_points * 3]; see recon_cloud().
ad::Var recon_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode);
/// Cloud `i` of a recon_head output as [recon_points, 3].
ad::Var recon_cloud(ad::Var recon, std::size_t i);
/// [clouds, feature] -> [clouds, 4] rotation logits.
ad::Var rotation_head(Model& model, ad::Tape& tape, ad::Var features, Mode mode);

/// x' = x + alpha * d on the masked rows, x elsewhere (bitwise).
ad::Var apply_destruction(ad::Var cloud, const RegionMask& mask, ad::Var displacements,
                          double alpha);

/// Eval-mode convenience wrappers for single clouds.
std::vector<double> encode(Model& model, const PointCloud& cloud, Mode mode = Mode::eval);
PointCloud displacements(Model& model, const PointCloud& cloud, Mode mode = Mode::eval);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes "PUDA", a u32 version, then (u32 name length, name, u32 rank,
/// u64 dims, f64 values) records, all little-endian, until end of file.
void save_checkpoint(const std::filesystem::path& path, Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace puda::nn
