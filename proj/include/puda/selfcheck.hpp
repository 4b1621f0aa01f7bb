#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "puda/gradcheck.hpp"
#include "puda/networks.hpp"

namespace puda::check {

/// Tiny network used for finite-difference checks.
nn::NetworkConfig tiny_network(std::size_t num_classes = 3, std::size_t recon_points = 6);

/// Random cloud with coordinates in [-1, 1].
PointCloud random_cloud(std::size_t n, Rng& rng, std::optional<int> label = {});

/// One named gradient check, run on an instance derived from `seed`.
struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// Every differentiable op plus the main, reconstruction and full
/// destruction-reconstruction losses.
std::vector<GradCase> gradient_cases();

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfcheckOptions {
  std::size_t grad_instances = 3;
  double grad_tolerance = 1e-3;
  std::size_t chamfer_pairs = 100;
  std::size_t invariance_trials = 10;
  /// Skews the batch-norm input gradient by (1 + value) while the checks
  /// run; any nonzero value must make the gradient checks fail.
  double batchnorm_backward_skew = 0.0;
};

std::vector<CheckOutcome> run_selfcheck(const SelfcheckOptions& opts = {});

// Individual property checks, shared with the test suites. The gap
// functions return the worst deviation observed.
double chamfer_oracle_gap(std::size_t pairs, std::uint64_t seed, std::size_t max_n = 256);
double encoder_permutation_gap(std::uint64_t seed,
                               const nn::NetworkConfig& net = tiny_network());
double transform_permutation_gap(std::uint64_t seed,
                                 const nn::NetworkConfig& net = tiny_network());
bool alpha_zero_is_identity(std::uint64_t seed, const nn::NetworkConfig& net = tiny_network());
bool unmasked_points_preserved(std::uint64_t seed,
                               const nn::NetworkConfig& net = tiny_network());

}  // namespace puda::check
