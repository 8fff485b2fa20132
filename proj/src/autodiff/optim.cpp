#include "trajgen/optim.hpp"

#include <cmath>

#include "trajgen/error.hpp"

namespace trajgen {

void adam_step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads,
               AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
  if (params.size() != grads.size()) {
    throw ContractError("adam_step: " + std::to_string(params.size()) + " params but " +
                        std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty() && state.step == 0) {
    for (const ad::Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match params");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(grads[k]) || !params[k]->same_shape(state.m[k])) {
      throw ShapeError("adam_step: param " + std::to_string(k) + " shape " +
                       ad::shape_str(params[k]->shape()) + " vs grad " +
                       ad::shape_str(grads[k].shape()));
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->values();
    auto g = grads[k].values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

double clip_global_norm(std::span<ad::Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g.values()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g.values()) x *= scale;
    }
  }
  return norm;
}

}  // namespace trajgen
