#include "puda/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace puda::ad {

void adam_step(std::span<Parameter* const> params, double lr,
               const AdamOptions& opts) {
  if (params.empty()) return;
  const long step = params.front()->step_count;
  for (const auto* p : params) {
    if (p->step_count != step) {
      throw ContractError("adam_step: parameter '" + p->name + "' is at step " +
                          std::to_string(p->step_count) + ", group is at " +
                          std::to_string(step));
    }
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("adam_step: gradient of '" + p->name + "' has shape " +
                           shape_str(p->grad.shape()));
    }
    if (!p->grad.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
  }

  const double t = static_cast<double>(step + 1);
  const double bc1 = 1.0 - std::pow(opts.beta1, t);
  const double bc2 = 1.0 - std::pow(opts.beta2, t);
  for (auto* p : params) {
    if (p->adam_m.shape() != p->value.shape()) p->adam_m = Tensor::zeros_like(p->value);
    if (p->adam_v.shape() != p->value.shape()) p->adam_v = Tensor::zeros_like(p->value);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i] + opts.weight_decay * p->value[i];
      double& m = p->adam_m[i];
      double& v = p->adam_v[i];
      m = opts.beta1 * m + (1.0 - opts.beta1) * g;
      v = opts.beta2 * v + (1.0 - opts.beta2) * g * g;
      p->value[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + opts.eps);
    }
    ++p->step_count;
  }
}

double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw RangeError("cosine_lr: step " + std::to_string(step) + " outside [0," +
                     std::to_string(total_steps) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

void zero_grads(std::span<Parameter* const> params) {
  for (auto* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      p->grad = Tensor::zeros_like(p->value);
    } else {
      p->grad.fill(0.0);
    }
  }
}

}  // namespace puda::ad
