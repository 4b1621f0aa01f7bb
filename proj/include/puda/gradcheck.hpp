#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "puda/geometry.hpp"
#include "puda/tape.hpp"

namespace puda::check {

/// Builds a scalar loss on `tape` from leaves holding the check inputs.
using LossFn = std::function<ad::Var(ad::Tape& tape, std::span<const ad::Var> inputs)>;

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates probed per tensor; larger tensors are subsampled.
  std::size_t max_coords = 48;
  std::uint64_t seed = 7;
  /// A coordinate is skipped when moving it by this much in either
  /// direction changes a ReLU sign, max-pool winner or nearest neighbour:
  /// central differences across a kink do not estimate the gradient.
  double kink_margin = 1e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;      // worst tensor
  double global_rel_error = 0.0;   // all probed coordinates together
  std::string worst;  // input or parameter with the largest error
  std::size_t probes = 0;
  std::size_t excluded = 0;  // coordinates within kink_margin of a kink
};

/// Gradients smaller than this are compared on an absolute scale: a bias
/// feeding batch norm has an exact zero gradient, and central differences
/// then return pure round-off of order 1e-11.
inline constexpr double kGradNormFloor = 1e-7;
/// Per-tensor errors are also floored at this fraction of the norm of the
/// whole probed gradient, so a tensor whose true gradient nearly cancels
/// (a shift undone by a later batch norm) is not judged on truncation
/// error alone.
inline constexpr double kRelativeFloor = 1e-3;

/// ||a - b|| / max(||a||, ||b||, floor).
double rel_error(std::span<const double> a, std::span<const double> b,
                 double floor = kGradNormFloor);

/// Compares reverse-mode gradients against central differences, for every
/// input tensor and every listed parameter.
GradCheckResult check_gradients(const LossFn& f, std::vector<ad::Tensor> inputs,
                                std::span<ad::Parameter* const> params = {},
                                const GradCheckOptions& opts = {});

// ---------------------------------------------------------------------------
// Reference implementations used as oracles.

/// O(n*m) chamfer distance.
double naive_chamfer(std::span<const Point3> a, std::span<const Point3> b);

/// k nearest indices by full sort on (squared distance, index).
std::vector<std::size_t> naive_knn(std::span<const Point3> points, std::size_t query_index,
                                   std::size_t k);

/// Brute-force nearest index (lowest index on ties).
std::size_t naive_nearest(std::span<const Point3> points, const Point3& q);

}  // namespace puda::check
