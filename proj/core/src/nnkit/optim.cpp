#include "hemorl/nnkit/optim.hpp"

#include <cmath>

#include "hemorl/errors.hpp"

namespace hemorl::nn {

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("adam lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
}

AdamState make_adam_state(const std::vector<Parameter*>& params, AdamConfig config) {
  config.validate();
  AdamState s;
  s.config = config;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape(), 0.0);
    s.v.emplace_back(p->value.shape(), 0.0);
  }
  return s;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()) + " parameters");
  }
  const AdamConfig& c = state.config;
  c.validate();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter& p = *params[k];
    if (!p.grad.same_shape(p.value) || !state.m[k].same_shape(p.value)) {
      throw DimensionError("adam: shape mismatch for parameter '" + p.name + "'");
    }
    if (p.trainable && !p.grad.all_finite()) {
      throw NumericError("adam: non-finite gradient in parameter '" + p.name + "' at step " +
                         std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.trainable) continue;
    auto w = p.value.values();
    const auto g = p.grad.values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      if (g[i] == 0.0) continue;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace hemorl::nn
