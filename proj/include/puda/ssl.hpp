#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "puda/networks.hpp"

namespace puda::ssl {

enum class Domain { source, target };

struct SslOptions {
  std::size_t variants = 2;      // M destroyed copies per cloud
  double region_fraction = 0.5;  // k = floor(fraction * n)
  double alpha = 0.05;
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  /// Stop the reconstruction term's gradient at x', so the transformation
  /// net only sees the adversarial term.
  bool detach_recon_from_transform = false;
};

/// Region size used for a cloud of n points.
std::size_t region_size(double fraction, std::size_t n);

struct Variant {
  RegionMask mask;
  ad::Var cloud;           // x' on the tape, differentiable w.r.t. omega
  ad::Var encoder_input;   // x' or its detached copy
};

/// One original cloud (the pseudo label) and its M destroyed variants.
struct SslBatchItem {
  PointCloud original;
  ad::Var original_var;
  std::vector<Variant> variants;
  Domain domain = Domain::source;
};

/// Draws M regions per cloud (distinct seeds), runs the shared
/// transformation net and applies x' = x + alpha * phi(x) on each region.
///
/// The transformation net runs once over the batch; invoking it M times
/// with shared parameters would give identical displacements, since batch
/// statistics over repeated clouds are unchanged.
std::vector<SslBatchItem> build_ssl_batch(ad::Tape& tape, nn::Model& model,
                                          std::span<const PointCloud> clouds,
                                          const SslOptions& opts, Rng& rng, ad::Mode mode,
                                          Domain domain = Domain::source);

/// Loss pieces of the destruction-reconstruction objective.
struct SslLossParts {
  ad::Var recon_term;  // lambda1 * CD(x_hat, x)
  ad::Var adv_term;    // lambda2 * CD(x', x)
  ad::Var total;       // recon_term - adv_term
  double recon() const { return recon_term.value().item(); }
  double adv() const { return adv_term.value().item(); }
  double value() const { return total.value().item(); }
};

/// Reconstructs every variant through encoder + reconstruction head and
/// averages the terms over variants and then over items.
SslLossParts ssl_loss(ad::Tape& tape, nn::Model& model, std::span<const SslBatchItem> items,
                      const SslOptions& opts, ad::Mode mode);

/// Quarter-turn rotation about the X axis; exact for every label.
PointCloud rotate_x_quarter(const PointCloud& cloud, int quarter_turns);

/// Draws a label in {0,1,2,3} and rotates by label * 90 degrees about X.
std::pair<PointCloud, int> rotation_task(const PointCloud& cloud, Rng& rng);

/// 4-way softmax cross-entropy.
ad::Var rotation_loss(ad::Var logits, std::span<const int> labels);

}  // namespace puda::ssl
