#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trajgen/autodiff.hpp"

namespace trajgen {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
};

// One bias-corrected Adam update. Moment buffers are created on the first call;
// afterwards every params/grads/state entry must agree in shape.
void adam_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads,
               AdamState& state, const AdamConfig& cfg);

// Rescales grads in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_global_norm(std::span<ad::Tensor> grads, double max_norm);

}  // namespace trajgen
