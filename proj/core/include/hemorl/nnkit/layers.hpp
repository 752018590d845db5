#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hemorl/nnkit/tensor.hpp"

namespace hemorl::nn {

enum class Mode { train, eval };

enum class LayerKind { dense, batchnorm, leaky_relu, lstm_cell, gru_cell };

std::string_view to_string(LayerKind kind) noexcept;
LayerKind layer_kind_from_string(std::string_view name);

/// Declarative description of one layer. `hyper` carries the kind-specific
/// knobs: "slope" (leaky_relu), "momentum" and "eps" (batchnorm).
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::map<std::string, double> hyper;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec batchnorm(std::size_t dim, double momentum = 0.9, double eps = 1e-5);
  static LayerSpec leaky_relu(std::size_t dim, double slope = 0.01);
  static LayerSpec lstm(std::size_t in, std::size_t hidden);
  static LayerSpec gru(std::size_t in, std::size_t hidden);

  double hyper_or(const std::string& key, double fallback) const;
  void validate() const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A named tensor with its gradient accumulator. Batchnorm running
/// statistics are stored as non-trainable parameters so that they travel
/// with checkpoints and target-network copies.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Initialisation scheme recorded in checkpoints.
inline constexpr std::string_view kInitScheme = "glorot_uniform;forget_bias=1";

/// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

class Layer {
 public:
  virtual ~Layer() = default;

  virtual const LayerSpec& spec() const noexcept = 0;
  /// Records whatever backward() needs.
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Eval-mode forward without touching the cache; safe to share across threads.
  virtual Tensor infer(const Tensor& x) const = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Dense final : public Layer {
 public:
  Dense(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix);

  const LayerSpec& spec() const noexcept override { return spec_; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

  Parameter& weight() noexcept { return weight_; }  // shape (in, out)
  Parameter& bias() noexcept { return bias_; }

 private:
  LayerSpec spec_;
  std::string name_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
  bool recorded_ = false;
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(const LayerSpec& spec, std::string prefix);

  const LayerSpec& spec() const noexcept override { return spec_; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

  Parameter& gamma() noexcept { return gamma_; }
  Parameter& beta() noexcept { return beta_; }
  const Tensor& running_mean() const noexcept { return running_mean_.value; }
  const Tensor& running_var() const noexcept { return running_var_.value; }

 private:
  LayerSpec spec_;
  std::string name_;
  double momentum_;
  double eps_;
  Parameter gamma_;
  Parameter beta_;
  Parameter running_mean_;
  Parameter running_var_;
  // cache
  Mode mode_ = Mode::eval;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool recorded_ = false;
};

class LeakyRelu final : public Layer {
 public:
  LeakyRelu(const LayerSpec& spec, std::string name);

  const LayerSpec& spec() const noexcept override { return spec_; }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor infer(const Tensor& x) const override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LeakyRelu>(*this); }

 private:
  LayerSpec spec_;
  std::string name_;
  double slope_;
  Tensor input_;
  bool recorded_ = false;
};

/// Feed-forward stack of dense / batchnorm / leaky_relu layers.
class Sequential {
 public:
  Sequential() = default;
  Sequential(std::vector<LayerSpec> specs, std::uint64_t seed, std::string name = "net");
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Tensor forward(const Tensor& x, Mode mode);
  Tensor infer(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  /// Dense weight matrices only (the usual target of an L1 penalty).
  std::vector<Parameter*> weights();
  void zero_grad();

  /// Copies every parameter value (including running statistics) from `other`.
  void copy_values_from(const Sequential& other);

  const std::vector<LayerSpec>& specs() const noexcept { return specs_; }
  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& name() const noexcept { return name_; }
  bool empty() const noexcept { return layers_.empty(); }

 private:
  std::vector<LayerSpec> specs_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::uint64_t seed_ = 0;
  std::string name_;
  bool recorded_ = false;
};

/// L1 penalty sum |w| over the given parameters.
double l1_norm(const std::vector<Parameter*>& params);
/// Adds lambda * sign(w) to each gradient; the subgradient at exactly 0 is 0.
void add_l1_subgradient(const std::vector<Parameter*>& params, double lambda);

}  // namespace hemorl::nn
