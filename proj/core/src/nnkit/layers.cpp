#include "hemorl/nnkit/layers.hpp"

#include <cmath>

#include "hemorl/errors.hpp"

namespace hemorl::nn {

namespace {

void check_width(const Tensor& x, std::size_t expected, const std::string& layer) {
  if (x.rank() == 0 || x.cols() != expected) {
    throw DimensionError("layer '" + layer + "' expects input width " + std::to_string(expected) + ", got shape " +
                         shape_string(x.shape()));
  }
}

void require_recorded(bool recorded, const std::string& layer) {
  if (!recorded) throw StateError("backward() on layer '" + layer + "' without a recorded forward pass");
}

Parameter make_param(std::string name, std::vector<std::size_t> shape, double fill = 0.0, bool trainable = true) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor(shape, fill);
  p.grad = Tensor(std::move(shape), 0.0);
  p.trainable = trainable;
  return p;
}

}  // namespace

std::string_view to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::lstm_cell: return "lstm_cell";
    case LayerKind::gru_cell: return "gru_cell";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::dense, LayerKind::batchnorm, LayerKind::leaky_relu, LayerKind::lstm_cell,
                 LayerKind::gru_cell}) {
    if (to_string(k) == name) return k;
  }
  throw DataError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, {}}; }

LayerSpec LayerSpec::batchnorm(std::size_t dim, double momentum, double eps) {
  return {LayerKind::batchnorm, dim, dim, {{"momentum", momentum}, {"eps", eps}}};
}

LayerSpec LayerSpec::leaky_relu(std::size_t dim, double slope) {
  return {LayerKind::leaky_relu, dim, dim, {{"slope", slope}}};
}

LayerSpec LayerSpec::lstm(std::size_t in, std::size_t hidden) { return {LayerKind::lstm_cell, in, hidden, {}}; }

LayerSpec LayerSpec::gru(std::size_t in, std::size_t hidden) { return {LayerKind::gru_cell, in, hidden, {}}; }

double LayerSpec::hyper_or(const std::string& key, double fallback) const {
  auto it = hyper.find(key);
  return it == hyper.end() ? fallback : it->second;
}

void LayerSpec::validate() const {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("layer dimensions must be positive");
  if (kind == LayerKind::leaky_relu) {
    const double slope = hyper_or("slope", 0.01);
    if (!(slope > 0.0 && slope < 1.0)) throw ConfigError("leaky_relu slope must lie in (0, 1)");
  }
  if ((kind == LayerKind::batchnorm || kind == LayerKind::leaky_relu) && in_dim != out_dim) {
    throw ConfigError(std::string(to_string(kind)) + " must preserve width");
  }
  if (kind == LayerKind::batchnorm) {
    const double m = hyper_or("momentum", 0.9);
    if (!(m >= 0.0 && m < 1.0)) throw ConfigError("batchnorm momentum must lie in [0, 1)");
    if (!(hyper_or("eps", 1e-5) > 0.0)) throw ConfigError("batchnorm eps must be positive");
  }
}

void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.values()) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

Dense::Dense(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix)
    : spec_(spec),
      name_(prefix),
      weight_(make_param(prefix + ".W", {spec.in_dim, spec.out_dim})),
      bias_(make_param(prefix + ".b", {spec.out_dim})) {
  spec_.validate();
  glorot_uniform(weight_.value, spec.in_dim, spec.out_dim, rng);
}

Tensor Dense::infer(const Tensor& x) const {
  check_width(x, spec_.in_dim, name_);
  Tensor y = Tensor::matrix(x.rows(), spec_.out_dim);
  auto ym = y.mat();
  ym.noalias() = x.mat() * weight_.value.mat();
  ym.rowwise() += bias_.value.mat().row(0);
  return y;
}

Tensor Dense::forward(const Tensor& x, Mode /*mode*/) {
  Tensor y = infer(x);
  input_ = x;
  recorded_ = true;
  return y;
}

Tensor Dense::backward(const Tensor& grad_out) {
  require_recorded(recorded_, name_);
  const auto dy = grad_out.mat();
  weight_.grad.mat().noalias() += input_.mat().transpose() * dy;
  bias_.grad.mat().row(0) += dy.colwise().sum();
  Tensor dx = Tensor::matrix(input_.rows(), spec_.in_dim);
  dx.mat().noalias() = dy * weight_.value.mat().transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(const LayerSpec& spec, std::string prefix)
    : spec_(spec),
      name_(prefix),
      momentum_(spec.hyper_or("momentum", 0.9)),
      eps_(spec.hyper_or("eps", 1e-5)),
      gamma_(make_param(prefix + ".gamma", {spec.out_dim}, 1.0)),
      beta_(make_param(prefix + ".beta", {spec.out_dim}, 0.0)),
      running_mean_(make_param(prefix + ".running_mean", {spec.out_dim}, 0.0, false)),
      running_var_(make_param(prefix + ".running_var", {spec.out_dim}, 1.0, false)) {
  spec_.validate();
}

Tensor BatchNorm::infer(const Tensor& x) const {
  check_width(x, spec_.in_dim, name_);
  const std::size_t n = x.rows();
  const std::size_t d = spec_.in_dim;
  Tensor y = Tensor::matrix(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    const double inv = 1.0 / std::sqrt(running_var_.value[j] + eps_);
    const double g = gamma_.value[j];
    const double b = beta_.value[j];
    const double mu = running_mean_.value[j];
    for (std::size_t i = 0; i < n; ++i) y.at(i, j) = g * (x.at(i, j) - mu) * inv + b;
  }
  return y;
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  check_width(x, spec_.in_dim, name_);
  const std::size_t n = x.rows();
  const std::size_t d = spec_.in_dim;
  mode_ = mode;
  xhat_ = Tensor::matrix(n, d);
  inv_std_.assign(d, 0.0);
  Tensor y = Tensor::matrix(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean;
    double var;
    if (mode == Mode::train) {
      mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x.at(i, j);
      mean /= static_cast<double>(n);
      var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double c = x.at(i, j) - mean;
        var += c * c;
      }
      var /= static_cast<double>(n);
      running_mean_.value[j] = momentum_ * running_mean_.value[j] + (1.0 - momentum_) * mean;
      running_var_.value[j] = momentum_ * running_var_.value[j] + (1.0 - momentum_) * var;
    } else {
      mean = running_mean_.value[j];
      var = running_var_.value[j];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[j] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      const double xh = (x.at(i, j) - mean) * inv;
      xhat_.at(i, j) = xh;
      y.at(i, j) = gamma_.value[j] * xh + beta_.value[j];
    }
  }
  recorded_ = true;
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  require_recorded(recorded_, name_);
  const std::size_t n = xhat_.rows();
  const std::size_t d = spec_.in_dim;
  Tensor dx = Tensor::matrix(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += grad_out.at(i, j);
      sum_dy_xhat += grad_out.at(i, j) * xhat_.at(i, j);
    }
    gamma_.grad[j] += sum_dy_xhat;
    beta_.grad[j] += sum_dy;
    const double g = gamma_.value[j];
    if (mode_ == Mode::train) {
      const double scale = g * inv_std_[j] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        dx.at(i, j) = scale * (static_cast<double>(n) * grad_out.at(i, j) - sum_dy - xhat_.at(i, j) * sum_dy_xhat);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) dx.at(i, j) = grad_out.at(i, j) * g * inv_std_[j];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// LeakyRelu
// ---------------------------------------------------------------------------

LeakyRelu::LeakyRelu(const LayerSpec& spec, std::string name)
    : spec_(spec), name_(std::move(name)), slope_(spec.hyper_or("slope", 0.01)) {
  spec_.validate();
}

Tensor LeakyRelu::infer(const Tensor& x) const {
  check_width(x, spec_.in_dim, name_);
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : slope_ * v;
  return y;
}

Tensor LeakyRelu::forward(const Tensor& x, Mode /*mode*/) {
  Tensor y = infer(x);
  input_ = x;
  recorded_ = true;
  return y;
}

Tensor LeakyRelu::backward(const Tensor& grad_out) {
  require_recorded(recorded_, name_);
  Tensor dx = grad_out;
  const auto in = input_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(in[i] > 0.0)) d[i] *= slope_;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

Sequential::Sequential(std::vector<LayerSpec> specs, std::uint64_t seed, std::string name)
    : specs_(std::move(specs)), seed_(seed), name_(std::move(name)) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& s = specs_[i];
    if (i > 0 && specs_[i - 1].out_dim != s.in_dim) {
      throw DimensionError(name_ + ": layer " + std::to_string(i) + " (" + std::string(to_string(s.kind)) +
                           ") input width " + std::to_string(s.in_dim) + " does not match previous output " +
                           std::to_string(specs_[i - 1].out_dim));
    }
    const std::string prefix = name_ + "." + std::to_string(i) + "." + std::string(to_string(s.kind));
    switch (s.kind) {
      case LayerKind::dense: layers_.push_back(std::make_unique<Dense>(s, rng, prefix)); break;
      case LayerKind::batchnorm: layers_.push_back(std::make_unique<BatchNorm>(s, prefix)); break;
      case LayerKind::leaky_relu: layers_.push_back(std::make_unique<LeakyRelu>(s, prefix)); break;
      default: throw ConfigError("Sequential supports dense, batchnorm and leaky_relu layers only");
    }
  }
}

Sequential::Sequential(const Sequential& other)
    : specs_(other.specs_), seed_(other.seed_), name_(other.name_), recorded_(other.recorded_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  recorded_ = true;
  return h;
}

Tensor Sequential::infer(const Tensor& x) const {
  Tensor h = x;
  for (const auto& l : layers_) h = l->infer(h);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  if (!recorded_) throw StateError(name_ + ": backward() without a recorded forward pass");
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    for (auto* p : l->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<const Parameter*> Sequential::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& l : layers_) {
    for (auto* p : l->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<Parameter*> Sequential::weights() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    if (auto* d = dynamic_cast<Dense*>(l.get())) out.push_back(&d->weight());
  }
  return out;
}

void Sequential::zero_grad() {
  for (auto* p : parameters()) p->grad.fill(0.0);
}

void Sequential::copy_values_from(const Sequential& other) {
  if (other.specs_ != specs_) throw DimensionError(name_ + ": cannot copy values from a different architecture");
  auto dst = parameters();
  auto src = other.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

std::size_t Sequential::in_dim() const { return specs_.empty() ? 0 : specs_.front().in_dim; }
std::size_t Sequential::out_dim() const { return specs_.empty() ? 0 : specs_.back().out_dim; }

double l1_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const auto* p : params) {
    for (double v : p->value.values()) s += std::fabs(v);
  }
  return s;
}

void add_l1_subgradient(const std::vector<Parameter*>& params, double lambda) {
  for (auto* p : params) {
    const auto w = p->value.values();
    auto g = p->grad.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] > 0.0) {
        g[i] += lambda;
      } else if (w[i] < 0.0) {
        g[i] -= lambda;
      }
    }
  }
}

}  // namespace hemorl::nn
