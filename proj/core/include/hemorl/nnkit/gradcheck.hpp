#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hemorl/nnkit/layers.hpp"
#include "hemorl/nnkit/recurrent.hpp"

namespace hemorl::nn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Non-empty when the check failed for a reason other than tolerance.
  std::string failure;
};

/// Central differences with step h over every trainable element of `params`.
/// `backprop` must zero the grads and fill them with d(loss)/d(param);
/// `loss` must evaluate the loss at the current parameter values.
/// Relative error per element is |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(const std::vector<Parameter*>& params, const std::function<double()>& loss,
                           const std::function<void()>& backprop, double tol, double h = 1e-5);

/// Checks a feed-forward net on input batch `x` (including d/dx) in `mode`,
/// using loss = sum(c * y) with fixed pseudo-random c drawn from `seed`.
GradCheckReport grad_check(Sequential& net, const Tensor& x, double tol, Mode mode = Mode::train,
                           std::uint64_t seed = 0);

/// Checks a recurrent layer unrolled over `xs` (including d/dx_t) with
/// loss = sum_t sum(c_t * h_t).
GradCheckReport grad_check(RecurrentLayer& cell, const std::vector<Tensor>& xs, double tol,
                           const std::vector<std::size_t>& lengths = {}, std::uint64_t seed = 0);

}  // namespace hemorl::nn
