#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dflow/errors.hpp"

namespace dflow {

struct AdamWHyper {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;

  explicit AdamWState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Decoupled weight decay: params are scaled by (1 - lr*wd) before the
// bias-corrected adaptive update. Entries with mask[i] == false are left
// untouched (their moments are not advanced either).
inline void adamw_step(std::span<double> params, std::span<const double> grad, AdamWState& state,
                       const AdamWHyper& hp, std::span<const bool> mask = {}) {
  if (grad.size() != params.size() || state.m.size() != params.size()) {
    throw ValidationError("adamw_step: size mismatch between params, grad and state");
  }
  if (!mask.empty() && mask.size() != params.size()) {
    throw ValidationError("adamw_step: mask size mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - hp.lr * hp.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double g = grad[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] * decay - hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

// Linear warmup followed by optional cosine annealing to zero.
inline double scheduled_lr(double base_lr, long step, long total_steps, long warmup, bool cosine) {
  if (warmup > 0 && step < warmup) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (!cosine || total_steps <= warmup) return base_lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * std::min(progress, 1.0)));
}

}  // namespace dflow
