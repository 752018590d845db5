#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hemorl/nnkit/layers.hpp"

namespace hemorl::nn {

/// Hidden state of a recurrent layer for a batch. `c` is empty for GRU.
struct RecurrentState {
  Tensor h;
  Tensor c;
};

/// One recurrent layer unrolled over time. Inputs are a vector of (batch x in)
/// tensors, one per step. `lengths[b]` marks how many leading steps are real
/// for row b; past its length a row carries its state forward unchanged, so
/// the state at the final step equals the state at the row's last real step.
class RecurrentLayer {
 public:
  virtual ~RecurrentLayer() = default;

  const LayerSpec& spec() const noexcept { return spec_; }
  std::size_t in_dim() const noexcept { return spec_.in_dim; }
  std::size_t hidden() const noexcept { return spec_.out_dim; }

  RecurrentState zero_state(std::size_t batch) const;

  /// Single step without recording anything.
  RecurrentState step(const Tensor& x, const RecurrentState& state) const;

  /// Unrolls from the zero state (or `init`) and records what backward needs.
  /// Returns h_t for every step.
  std::vector<Tensor> forward_sequence(const std::vector<Tensor>& xs, const std::vector<std::size_t>& lengths = {},
                                       const RecurrentState* init = nullptr);

  /// `dhs[t]` is d(loss)/d(h_t) from outside the layer. Accumulates parameter
  /// gradients and returns d(loss)/d(x_t).
  std::vector<Tensor> backward_sequence(const std::vector<Tensor>& dhs);

  /// d(loss)/d(initial state) from the last backward_sequence call.
  const RecurrentState& initial_state_grad() const noexcept { return d_init_; }

  virtual std::vector<Parameter*> parameters() = 0;
  std::vector<const Parameter*> parameters() const;
  virtual std::unique_ptr<RecurrentLayer> clone() const = 0;

 protected:
  explicit RecurrentLayer(LayerSpec spec, std::string name) : spec_(std::move(spec)), name_(std::move(name)) {}

  struct StepCache {
    Tensor x;
    Tensor h_prev;
    Tensor c_prev;
    Tensor gates;  // post-activation gate values
    Tensor c;      // new cell state (LSTM)
    Tensor hn;     // h_prev * Whn + bhn (GRU)
    std::vector<char> active;
  };

  virtual StepCache step_cached(const Tensor& x, const RecurrentState& state) const = 0;
  virtual RecurrentState state_from_cache(const StepCache& cache) const = 0;
  /// Given dh, dc into the step output, accumulates parameter grads and
  /// writes dx, dh_prev, dc_prev. Rows that were inactive are handled by the caller.
  virtual void step_backward(const StepCache& cache, const Tensor& dh, const Tensor& dc, Tensor& dx, Tensor& dh_prev,
                             Tensor& dc_prev) = 0;
  virtual bool has_cell() const noexcept = 0;

  void check_input(const Tensor& x) const;

  LayerSpec spec_;
  std::string name_;

 private:
  std::vector<StepCache> caches_;
  RecurrentState d_init_;
  bool recorded_ = false;
};

/// Gate order i, f, g, o. Z = x Wx + h Wh + b.
class Lstm final : public RecurrentLayer {
 public:
  Lstm(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix);

  std::vector<Parameter*> parameters() override { return {&wx_, &wh_, &b_}; }
  std::unique_ptr<RecurrentLayer> clone() const override { return std::make_unique<Lstm>(*this); }

  Parameter& wx() noexcept { return wx_; }
  Parameter& wh() noexcept { return wh_; }
  Parameter& bias() noexcept { return b_; }

 protected:
  StepCache step_cached(const Tensor& x, const RecurrentState& state) const override;
  RecurrentState state_from_cache(const StepCache& cache) const override;
  void step_backward(const StepCache& cache, const Tensor& dh, const Tensor& dc, Tensor& dx, Tensor& dh_prev,
                     Tensor& dc_prev) override;
  bool has_cell() const noexcept override { return true; }

 private:
  Parameter wx_;
  Parameter wh_;
  Parameter b_;
};

/// Gate order r, z, n.
///   r = s(x Wxr + bxr + h Whr + bhr)
///   z = s(x Wxz + bxz + h Whz + bhz)
///   n = tanh(x Wxn + bxn + r * (h Whn + bhn))
///   h' = (1 - z) * n + z * h
class Gru final : public RecurrentLayer {
 public:
  Gru(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix);

  std::vector<Parameter*> parameters() override { return {&wx_, &wh_, &bx_, &bh_}; }
  std::unique_ptr<RecurrentLayer> clone() const override { return std::make_unique<Gru>(*this); }

  Parameter& wx() noexcept { return wx_; }
  Parameter& wh() noexcept { return wh_; }
  Parameter& bias_x() noexcept { return bx_; }
  Parameter& bias_h() noexcept { return bh_; }

 protected:
  StepCache step_cached(const Tensor& x, const RecurrentState& state) const override;
  RecurrentState state_from_cache(const StepCache& cache) const override;
  void step_backward(const StepCache& cache, const Tensor& dh, const Tensor& dc, Tensor& dx, Tensor& dh_prev,
                     Tensor& dc_prev) override;
  bool has_cell() const noexcept override { return false; }

 private:
  Parameter wx_;
  Parameter wh_;
  Parameter bx_;
  Parameter bh_;
};

std::unique_ptr<RecurrentLayer> make_recurrent(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix);

/// The recurrent_step operation: one step of an LSTM or GRU cell.
inline RecurrentState recurrent_step(const RecurrentLayer& cell, const Tensor& x, const RecurrentState& state) {
  return cell.step(x, state);
}

}  // namespace hemorl::nn
