#include "hemorl/nnkit/recurrent.hpp"

#include <cmath>

#include "hemorl/errors.hpp"

namespace hemorl::nn {

namespace {

Parameter make_param(std::string name, std::vector<std::size_t> shape) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor(shape, 0.0);
  p.grad = Tensor(std::move(shape), 0.0);
  return p;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Fills each gate block of a (rows, gates*hidden) weight with glorot(fan_in, hidden).
void init_gates(Tensor& w, std::size_t gates, std::size_t hidden, std::mt19937_64& rng) {
  const std::size_t fan_in = w.rows();
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + hidden));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (std::size_t r = 0; r < fan_in; ++r) {
    for (std::size_t c = 0; c < gates * hidden; ++c) w.at(r, c) = dist(rng);
  }
}

}  // namespace

RecurrentState RecurrentLayer::step(const Tensor& x, const RecurrentState& state) const {
  return state_from_cache(step_cached(x, state));
}

RecurrentState RecurrentLayer::zero_state(std::size_t batch) const {
  RecurrentState s;
  s.h = Tensor::matrix(batch, hidden());
  if (has_cell()) s.c = Tensor::matrix(batch, hidden());
  return s;
}

void RecurrentLayer::check_input(const Tensor& x) const {
  if (x.rank() == 0 || x.cols() != spec_.in_dim) {
    throw DimensionError("layer '" + name_ + "' expects input width " + std::to_string(spec_.in_dim) +
                         ", got shape " + shape_string(x.shape()));
  }
}

std::vector<const Parameter*> RecurrentLayer::parameters() const {
  auto ps = const_cast<RecurrentLayer*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::vector<Tensor> RecurrentLayer::forward_sequence(const std::vector<Tensor>& xs,
                                                     const std::vector<std::size_t>& lengths,
                                                     const RecurrentState* init) {
  caches_.clear();
  recorded_ = false;
  if (xs.empty()) {
    recorded_ = true;
    return {};
  }
  const std::size_t batch = xs.front().rows();
  if (!lengths.empty() && lengths.size() != batch) {
    throw DimensionError("layer '" + name_ + "': lengths size " + std::to_string(lengths.size()) +
                         " does not match batch " + std::to_string(batch));
  }
  RecurrentState state = init ? *init : zero_state(batch);
  if (state.h.rows() != batch || state.h.cols() != hidden()) {
    throw DimensionError("layer '" + name_ + "': initial state shape " + shape_string(state.h.shape()));
  }
  std::vector<Tensor> hs;
  hs.reserve(xs.size());
  caches_.reserve(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (xs[t].rows() != batch) throw DimensionError("layer '" + name_ + "': ragged batch across time steps");
    StepCache cache = step_cached(xs[t], state);
    cache.active.assign(batch, 1);
    if (!lengths.empty()) {
      for (std::size_t b = 0; b < batch; ++b) cache.active[b] = t < lengths[b] ? 1 : 0;
    }
    RecurrentState next = state_from_cache(cache);
    for (std::size_t b = 0; b < batch; ++b) {
      if (cache.active[b]) continue;
      for (std::size_t j = 0; j < hidden(); ++j) {
        next.h.at(b, j) = state.h.at(b, j);
        if (has_cell()) next.c.at(b, j) = state.c.at(b, j);
      }
    }
    hs.push_back(next.h);
    caches_.push_back(std::move(cache));
    state = std::move(next);
  }
  recorded_ = true;
  return hs;
}

std::vector<Tensor> RecurrentLayer::backward_sequence(const std::vector<Tensor>& dhs) {
  if (!recorded_) throw StateError("backward_sequence() on layer '" + name_ + "' without a recorded forward pass");
  if (dhs.size() != caches_.size()) {
    throw DimensionError("layer '" + name_ + "': got " + std::to_string(dhs.size()) + " output gradients for " +
                         std::to_string(caches_.size()) + " steps");
  }
  std::vector<Tensor> dxs(caches_.size());
  if (caches_.empty()) return dxs;
  const std::size_t batch = caches_.front().x.rows();
  const std::size_t hdim = hidden();
  Tensor dh_next = Tensor::matrix(batch, hdim);
  Tensor dc_next = Tensor::matrix(batch, hdim);
  for (std::size_t ti = caches_.size(); ti-- > 0;) {
    const StepCache& cache = caches_[ti];
    Tensor dh = dh_next;
    if (!dhs[ti].empty()) {
      if (dhs[ti].rows() != batch || dhs[ti].cols() != hdim) {
        throw DimensionError("layer '" + name_ + "': output gradient shape " + shape_string(dhs[ti].shape()));
      }
      dh.mat() += dhs[ti].mat();
    }
    Tensor dc = dc_next;
    Tensor dh_act = dh;
    Tensor dc_act = dc;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cache.active[b]) continue;
      for (std::size_t j = 0; j < hdim; ++j) {
        dh_act.at(b, j) = 0.0;
        dc_act.at(b, j) = 0.0;
      }
    }
    Tensor dx = Tensor::matrix(batch, spec_.in_dim);
    Tensor dh_prev = Tensor::matrix(batch, hdim);
    Tensor dc_prev = Tensor::matrix(batch, hdim);
    step_backward(cache, dh_act, dc_act, dx, dh_prev, dc_prev);
    for (std::size_t b = 0; b < batch; ++b) {
      if (cache.active[b]) continue;
      for (std::size_t j = 0; j < hdim; ++j) {
        dh_prev.at(b, j) = dh.at(b, j);
        dc_prev.at(b, j) = dc.at(b, j);
      }
    }
    dxs[ti] = std::move(dx);
    dh_next = std::move(dh_prev);
    dc_next = std::move(dc_prev);
  }
  d_init_.h = std::move(dh_next);
  d_init_.c = has_cell() ? std::move(dc_next) : Tensor();
  return dxs;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

Lstm::Lstm(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix)
    : RecurrentLayer(spec, prefix),
      wx_(make_param(prefix + ".Wx", {spec.in_dim, 4 * spec.out_dim})),
      wh_(make_param(prefix + ".Wh", {spec.out_dim, 4 * spec.out_dim})),
      b_(make_param(prefix + ".b", {4 * spec.out_dim})) {
  spec_.validate();
  init_gates(wx_.value, 4, spec.out_dim, rng);
  init_gates(wh_.value, 4, spec.out_dim, rng);
  for (std::size_t j = 0; j < spec.out_dim; ++j) b_.value[spec.out_dim + j] = 1.0;
}

RecurrentLayer::StepCache Lstm::step_cached(const Tensor& x, const RecurrentState& state) const {
  check_input(x);
  const std::size_t batch = x.rows();
  const std::size_t hd = hidden();
  if (state.h.rows() != batch || state.h.cols() != hd || state.c.rows() != batch || state.c.cols() != hd) {
    throw DimensionError("layer '" + name_ + "': state shape does not match batch " + std::to_string(batch) +
                         " x hidden " + std::to_string(hd));
  }
  StepCache cache;
  cache.x = x;
  cache.h_prev = state.h;
  cache.c_prev = state.c;
  cache.gates = Tensor::matrix(batch, 4 * hd);
  auto z = cache.gates.mat();
  z.noalias() = x.mat() * wx_.value.mat();
  z.noalias() += state.h.mat() * wh_.value.mat();
  z.rowwise() += b_.value.mat().row(0);
  cache.c = Tensor::matrix(batch, hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) {
      const double i = sigmoid(cache.gates.at(b, j));
      const double f = sigmoid(cache.gates.at(b, hd + j));
      const double g = std::tanh(cache.gates.at(b, 2 * hd + j));
      const double o = sigmoid(cache.gates.at(b, 3 * hd + j));
      cache.gates.at(b, j) = i;
      cache.gates.at(b, hd + j) = f;
      cache.gates.at(b, 2 * hd + j) = g;
      cache.gates.at(b, 3 * hd + j) = o;
      cache.c.at(b, j) = f * state.c.at(b, j) + i * g;
    }
  }
  return cache;
}

RecurrentState Lstm::state_from_cache(const StepCache& cache) const {
  const std::size_t batch = cache.x.rows();
  const std::size_t hd = hidden();
  RecurrentState out;
  out.h = Tensor::matrix(batch, hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) out.h.at(b, j) = cache.gates.at(b, 3 * hd + j) * std::tanh(cache.c.at(b, j));
  }
  out.c = cache.c;
  return out;
}

void Lstm::step_backward(const StepCache& cache, const Tensor& dh, const Tensor& dc, Tensor& dx, Tensor& dh_prev,
                         Tensor& dc_prev) {
  const std::size_t batch = cache.x.rows();
  const std::size_t hd = hidden();
  Tensor dz = Tensor::matrix(batch, 4 * hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) {
      const double i = cache.gates.at(b, j);
      const double f = cache.gates.at(b, hd + j);
      const double g = cache.gates.at(b, 2 * hd + j);
      const double o = cache.gates.at(b, 3 * hd + j);
      const double tc = std::tanh(cache.c.at(b, j));
      const double d_h = dh.at(b, j);
      const double dct = dc.at(b, j) + d_h * o * (1.0 - tc * tc);
      dz.at(b, j) = dct * g * i * (1.0 - i);
      dz.at(b, hd + j) = dct * cache.c_prev.at(b, j) * f * (1.0 - f);
      dz.at(b, 2 * hd + j) = dct * i * (1.0 - g * g);
      dz.at(b, 3 * hd + j) = d_h * tc * o * (1.0 - o);
      dc_prev.at(b, j) = dct * f;
    }
  }
  const auto dzm = dz.mat();
  wx_.grad.mat().noalias() += cache.x.mat().transpose() * dzm;
  wh_.grad.mat().noalias() += cache.h_prev.mat().transpose() * dzm;
  b_.grad.mat().row(0) += dzm.colwise().sum();
  dx.mat().noalias() = dzm * wx_.value.mat().transpose();
  dh_prev.mat().noalias() = dzm * wh_.value.mat().transpose();
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

Gru::Gru(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix)
    : RecurrentLayer(spec, prefix),
      wx_(make_param(prefix + ".Wx", {spec.in_dim, 3 * spec.out_dim})),
      wh_(make_param(prefix + ".Wh", {spec.out_dim, 3 * spec.out_dim})),
      bx_(make_param(prefix + ".bx", {3 * spec.out_dim})),
      bh_(make_param(prefix + ".bh", {3 * spec.out_dim})) {
  spec_.validate();
  init_gates(wx_.value, 3, spec.out_dim, rng);
  init_gates(wh_.value, 3, spec.out_dim, rng);
}

RecurrentLayer::StepCache Gru::step_cached(const Tensor& x, const RecurrentState& state) const {
  check_input(x);
  const std::size_t batch = x.rows();
  const std::size_t hd = hidden();
  if (state.h.rows() != batch || state.h.cols() != hd) {
    throw DimensionError("layer '" + name_ + "': state shape does not match batch " + std::to_string(batch) +
                         " x hidden " + std::to_string(hd));
  }
  StepCache cache;
  cache.x = x;
  cache.h_prev = state.h;
  Tensor gx = Tensor::matrix(batch, 3 * hd);
  Tensor gh = Tensor::matrix(batch, 3 * hd);
  gx.mat().noalias() = x.mat() * wx_.value.mat();
  gx.mat().rowwise() += bx_.value.mat().row(0);
  gh.mat().noalias() = state.h.mat() * wh_.value.mat();
  gh.mat().rowwise() += bh_.value.mat().row(0);
  cache.gates = Tensor::matrix(batch, 3 * hd);
  cache.hn = Tensor::matrix(batch, hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) {
      const double r = sigmoid(gx.at(b, j) + gh.at(b, j));
      const double z = sigmoid(gx.at(b, hd + j) + gh.at(b, hd + j));
      const double hn = gh.at(b, 2 * hd + j);
      const double n = std::tanh(gx.at(b, 2 * hd + j) + r * hn);
      cache.gates.at(b, j) = r;
      cache.gates.at(b, hd + j) = z;
      cache.gates.at(b, 2 * hd + j) = n;
      cache.hn.at(b, j) = hn;
    }
  }
  return cache;
}

RecurrentState Gru::state_from_cache(const StepCache& cache) const {
  const std::size_t batch = cache.x.rows();
  const std::size_t hd = hidden();
  RecurrentState out;
  out.h = Tensor::matrix(batch, hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) {
      const double z = cache.gates.at(b, hd + j);
      const double n = cache.gates.at(b, 2 * hd + j);
      out.h.at(b, j) = (1.0 - z) * n + z * cache.h_prev.at(b, j);
    }
  }
  return out;
}

void Gru::step_backward(const StepCache& cache, const Tensor& dh, const Tensor& /*dc*/, Tensor& dx, Tensor& dh_prev,
                        Tensor& /*dc_prev*/) {
  const std::size_t batch = cache.x.rows();
  const std::size_t hd = hidden();
  Tensor dgx = Tensor::matrix(batch, 3 * hd);
  Tensor dgh = Tensor::matrix(batch, 3 * hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < hd; ++j) {
      const double r = cache.gates.at(b, j);
      const double z = cache.gates.at(b, hd + j);
      const double n = cache.gates.at(b, 2 * hd + j);
      const double hp = cache.h_prev.at(b, j);
      const double d_h = dh.at(b, j);
      const double dan = d_h * (1.0 - z) * (1.0 - n * n);
      const double daz = d_h * (hp - n) * z * (1.0 - z);
      const double dar = dan * cache.hn.at(b, j) * r * (1.0 - r);
      dgx.at(b, j) = dar;
      dgx.at(b, hd + j) = daz;
      dgx.at(b, 2 * hd + j) = dan;
      dgh.at(b, j) = dar;
      dgh.at(b, hd + j) = daz;
      dgh.at(b, 2 * hd + j) = dan * r;
      dh_prev.at(b, j) = d_h * z;
    }
  }
  wx_.grad.mat().noalias() += cache.x.mat().transpose() * dgx.mat();
  bx_.grad.mat().row(0) += dgx.mat().colwise().sum();
  wh_.grad.mat().noalias() += cache.h_prev.mat().transpose() * dgh.mat();
  bh_.grad.mat().row(0) += dgh.mat().colwise().sum();
  dx.mat().noalias() = dgx.mat() * wx_.value.mat().transpose();
  dh_prev.mat().noalias() += dgh.mat() * wh_.value.mat().transpose();
}

std::unique_ptr<RecurrentLayer> make_recurrent(const LayerSpec& spec, std::mt19937_64& rng, std::string prefix) {
  switch (spec.kind) {
    case LayerKind::lstm_cell: return std::make_unique<Lstm>(spec, rng, std::move(prefix));
    case LayerKind::gru_cell: return std::make_unique<Gru>(spec, rng, std::move(prefix));
    default: throw ConfigError("make_recurrent: '" + std::string(to_string(spec.kind)) + "' is not a recurrent cell");
  }
}

}  // namespace hemorl::nn
