#pragma once

#include <span>

#include "puda/tape.hpp"

namespace puda::ad {

struct AdamOptions {
  double weight_decay = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected ADAM update over a parameter group.
///
/// Weight decay is added to the gradient as an L2 term before the moment
/// updates. All parameters must share the same step count. Throws
/// NumericError naming the first parameter whose gradient is not finite;
/// in that case no parameter is modified.
void adam_step(std::span<Parameter* const> params, double lr,
               const AdamOptions& opts = {});

/// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(long step, long total_steps, double base_lr);

void zero_grads(std::span<Parameter* const> params);

}  // namespace puda::ad
