#pragma once

#include <cstdint>
#include <vector>

#include "hemorl/nnkit/layers.hpp"

namespace hemorl::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// Zeroed moments shaped like `params`.
AdamState make_adam_state(const std::vector<Parameter*>& params, AdamConfig config = {});

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Non-trainable parameters are skipped. An element whose gradient is exactly
/// zero keeps its value while its moments still decay, so a zero gradient
/// never moves a parameter. Throws NumericError naming the parameter on NaN/Inf.
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

}  // namespace hemorl::nn
