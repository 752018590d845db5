#include "hemorl/embed/embed.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hemorl/errors.hpp"
#include "hemorl/nnkit/checkpoint.hpp"
#include "hemorl/nnkit/optim.hpp"
#include "hemorl/util.hpp"

namespace hemorl::embed {

using discretize::Episode;
using nn::Tensor;

std::string_view to_string(Arch arch) noexcept { return arch == Arch::lstm ? "lstm" : "gru"; }

Arch arch_from_string(std::string_view s) {
  if (s == "lstm") return Arch::lstm;
  if (s == "gru") return Arch::gru;
  throw ConfigError("unknown embedding architecture '" + std::string(s) + "'");
}

void EmbedConfig::validate() const {
  if (hidden == 0) throw ConfigError("embedding hidden size must be > 0");
  if (batch_size == 0) throw ConfigError("embedding batch size must be > 0");
  if (!(lr > 0.0)) throw ConfigError("embedding learning rate must be > 0");
}

namespace {

nn::LayerSpec recurrent_spec(Arch arch, std::size_t in, std::size_t hidden) {
  return arch == Arch::lstm ? nn::LayerSpec::lstm(in, hidden) : nn::LayerSpec::gru(in, hidden);
}

std::unique_ptr<nn::RecurrentLayer> clone_of(const std::unique_ptr<nn::RecurrentLayer>& p) {
  return p ? p->clone() : nullptr;
}

Tensor row_of(std::span<const double> xs) { return Tensor::row(std::vector<double>(xs.begin(), xs.end())); }

}  // namespace

EmbedModel::EmbedModel(Arch arch, std::vector<std::string> features, std::size_t hidden, std::uint64_t seed,
                       std::string prep_hash)
    : arch_(arch), features_(std::move(features)), hidden_(hidden), seed_(seed), prep_hash_(std::move(prep_hash)) {
  if (features_.empty()) throw ConfigError("embedding needs at least one feature");
  if (hidden_ == 0) throw ConfigError("embedding hidden size must be > 0");
  const std::size_t f = features_.size();
  std::mt19937_64 rng(seed);
  enc0_ = nn::make_recurrent(recurrent_spec(arch, f, hidden), rng, "embed.enc0");
  enc1_ = nn::make_recurrent(recurrent_spec(arch, hidden, hidden), rng, "embed.enc1");
  dec0_ = nn::make_recurrent(recurrent_spec(arch, hidden + f, hidden), rng, "embed.dec0");
  dec1_ = nn::make_recurrent(recurrent_spec(arch, hidden, hidden), rng, "embed.dec1");
  out_ = nn::Sequential({nn::LayerSpec::dense(hidden, f)}, derive_seed(seed, 2), "embed.out");
}

EmbedModel::EmbedModel(const EmbedModel& o)
    : arch_(o.arch_),
      features_(o.features_),
      hidden_(o.hidden_),
      seed_(o.seed_),
      prep_hash_(o.prep_hash_),
      enc0_(clone_of(o.enc0_)),
      enc1_(clone_of(o.enc1_)),
      dec0_(clone_of(o.dec0_)),
      dec1_(clone_of(o.dec1_)),
      out_(o.out_) {}

EmbedModel& EmbedModel::operator=(const EmbedModel& o) {
  if (this != &o) *this = EmbedModel(o);
  return *this;
}

std::vector<nn::Parameter*> EmbedModel::parameters() {
  std::vector<nn::Parameter*> ps;
  for (auto* l : {enc0_.get(), enc1_.get(), dec0_.get(), dec1_.get()}) {
    for (auto* p : l->parameters()) ps.push_back(p);
  }
  for (auto* p : out_.parameters()) ps.push_back(p);
  return ps;
}

std::vector<const nn::Parameter*> EmbedModel::parameters() const {
  auto ps = const_cast<EmbedModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

Tensor EmbedModel::embed_sequence(const std::vector<std::vector<double>>& features) const {
  Tensor out = Tensor::matrix(features.size(), hidden_);
  auto s0 = enc0_->zero_state(1);
  auto s1 = enc1_->zero_state(1);
  for (std::size_t t = 0; t < features.size(); ++t) {
    if (features[t].size() != feature_dim()) {
      throw DimensionError("embedding expects " + std::to_string(feature_dim()) + " features, got " +
                           std::to_string(features[t].size()));
    }
    s0 = enc0_->step(row_of(features[t]), s0);
    s1 = enc1_->step(s0.h, s1);
    std::copy(s1.h.values().begin(), s1.h.values().end(), out.values().begin() + static_cast<long>(t * hidden_));
  }
  return out;
}

std::vector<double> EmbedModel::embed_history(const Episode& episode, std::size_t t) const {
  if (t >= episode.length()) {
    throw DimensionError("bin " + std::to_string(t) + " out of range for episode of length " +
                         std::to_string(episode.length()));
  }
  const std::vector<std::vector<double>> prefix(episode.features.begin(),
                                                episode.features.begin() + static_cast<long>(t + 1));
  const Tensor e = embed_sequence(prefix);
  const auto r = e.row_span(t);
  return {r.begin(), r.end()};
}

Tensor EmbedModel::reconstruct(const std::vector<std::vector<double>>& features) const {
  const std::size_t n = features.size();
  const std::size_t f = feature_dim();
  Tensor out = Tensor::matrix(n, f);
  if (n == 0) return out;
  const Tensor enc = embed_sequence(features);
  const auto ctx = enc.row_span(n - 1);
  auto d0 = dec0_->zero_state(1);
  auto d1 = dec1_->zero_state(1);
  Tensor in = Tensor::matrix(1, hidden_ + f);
  std::copy(ctx.begin(), ctx.end(), in.values().begin());
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) std::copy(features[t - 1].begin(), features[t - 1].end(), in.values().begin() + static_cast<long>(hidden_));
    d0 = dec0_->step(in, d0);
    d1 = dec1_->step(d0.h, d1);
    const Tensor y = out_.infer(d1.h);
    std::copy(y.values().begin(), y.values().end(), out.values().begin() + static_cast<long>(t * f));
  }
  return out;
}

double EmbedModel::reconstruction_mse(const std::vector<const Episode*>& episodes) const {
  CompensatedSum total;
  std::size_t count = 0;
  for (const auto* ep : episodes) {
    const Tensor y = reconstruct(ep->features);
    for (std::size_t t = 0; t < ep->length(); ++t) {
      for (std::size_t j = 0; j < feature_dim(); ++j) {
        const double d = y.at(t, j) - ep->features[t][j];
        total.add(d * d);
      }
    }
    count += ep->length() * feature_dim();
  }
  return count ? total.value() / static_cast<double>(count) : 0.0;
}

double EmbedModel::loss_and_grad(const std::vector<const Episode*>& batch) {
  if (batch.empty()) throw DataError("empty embedding batch");
  const std::size_t b = batch.size();
  const std::size_t f = feature_dim();
  const std::size_t h = hidden_;
  std::vector<std::size_t> lengths(b);
  std::size_t tmax = 0;
  for (std::size_t i = 0; i < b; ++i) {
    lengths[i] = batch[i]->length();
    if (lengths[i] == 0) throw DataError("empty episode '" + batch[i]->patient_id + "'");
    tmax = std::max(tmax, lengths[i]);
  }
  for (auto* p : parameters()) p->grad.fill(0.0);

  std::vector<Tensor> xs(tmax, Tensor::matrix(b, f));
  std::size_t valid = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < lengths[i]; ++t) {
      const auto& row = batch[i]->features[t];
      if (row.size() != f) throw DimensionError("episode feature width differs from the embedding");
      std::copy(row.begin(), row.end(), xs[t].values().begin() + static_cast<long>(i * f));
    }
    valid += lengths[i];
  }

  const auto h0 = enc0_->forward_sequence(xs, lengths);
  const auto h1 = enc1_->forward_sequence(h0, lengths);
  const Tensor& ctx = h1.back();  // masked rows carry their last valid state

  std::vector<Tensor> din(tmax, Tensor::matrix(b, h + f));
  for (std::size_t t = 0; t < tmax; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      auto dst = din[t].values().begin() + static_cast<long>(i * (h + f));
      const auto c = ctx.row_span(i);
      std::copy(c.begin(), c.end(), dst);
      if (t > 0) {
        const auto prev = xs[t - 1].row_span(i);
        std::copy(prev.begin(), prev.end(), dst + static_cast<long>(h));
      }
    }
  }
  const auto g0 = dec0_->forward_sequence(din, lengths);
  const auto g1 = dec1_->forward_sequence(g0, lengths);

  Tensor stacked = Tensor::matrix(tmax * b, h);
  for (std::size_t t = 0; t < tmax; ++t) {
    std::copy(g1[t].values().begin(), g1[t].values().end(), stacked.values().begin() + static_cast<long>(t * b * h));
  }
  const Tensor y = out_.forward(stacked, nn::Mode::train);

  const double denom = static_cast<double>(valid * f);
  CompensatedSum loss;
  Tensor dy = Tensor::matrix(tmax * b, f);
  for (std::size_t t = 0; t < tmax; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      if (t >= lengths[i]) continue;
      const std::size_t r = t * b + i;
      for (std::size_t j = 0; j < f; ++j) {
        const double d = y.at(r, j) - xs[t].at(i, j);
        loss.add(d * d);
        dy.at(r, j) = 2.0 * d / denom;
      }
    }
  }
  const Tensor dstacked = out_.backward(dy);
  std::vector<Tensor> dg1(tmax, Tensor::matrix(b, h));
  for (std::size_t t = 0; t < tmax; ++t) {
    std::copy(dstacked.values().begin() + static_cast<long>(t * b * h),
              dstacked.values().begin() + static_cast<long>((t + 1) * b * h), dg1[t].values().begin());
  }
  const auto dg0 = dec1_->backward_sequence(dg1);
  const auto ddin = dec0_->backward_sequence(dg0);
  Tensor dctx = Tensor::matrix(b, h);
  for (std::size_t t = 0; t < tmax; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t k = 0; k < h; ++k) dctx.at(i, k) += ddin[t].at(i, k);
    }
  }
  std::vector<Tensor> dh1(tmax);
  dh1.back() = dctx;
  const auto dh0 = enc1_->backward_sequence(dh1);
  enc0_->backward_sequence(dh0);
  return loss.value() / denom;
}

void EmbedModel::save(const std::filesystem::path& path) const {
  nn::CheckpointHeader header;
  header.layers = {enc0_->spec(), enc1_->spec(), dec0_->spec(), dec1_->spec(), out_.specs().front()};
  header.seed = seed_;
  header.extra = {{"kind", "embed"},
                  {"arch", to_string(arch_)},
                  {"hidden", hidden_},
                  {"features", features_},
                  {"prep_hash", prep_hash_}};
  nn::save_checkpoint(path, header, parameters());
}

EmbedModel EmbedModel::load(const std::filesystem::path& path, const std::string& expected_prep_hash) {
  const auto ckpt = nn::load_checkpoint(path);
  const auto& x = ckpt.header.extra;
  if (!x.contains("kind") || x.at("kind") != "embed") throw DataError(path.string() + " is not an embedding checkpoint");
  const auto hash = x.at("prep_hash").get<std::string>();
  if (hash != expected_prep_hash) {
    throw DataError("embedding checkpoint " + path.filename().string() +
                    " was trained on different preprocessing (prep hash " + hash + ", expected " +
                    expected_prep_hash + ")");
  }
  EmbedModel model(arch_from_string(x.at("arch").get<std::string>()), x.at("features").get<std::vector<std::string>>(),
                   x.at("hidden").get<std::size_t>(), ckpt.header.seed, hash);
  nn::restore_parameters(ckpt, model.parameters());
  return model;
}

EmbedSession::EmbedSession(const EmbedModel& model)
    : model_(&model), s0_(model.enc0_->zero_state(1)), s1_(model.enc1_->zero_state(1)) {}

std::vector<double> EmbedSession::step(std::span<const double> features) {
  if (features.size() != model_->feature_dim()) throw DimensionError("embedding session: wrong feature width");
  s0_ = model_->enc0_->step(row_of(features), s0_);
  s1_ = model_->enc1_->step(s0_.h, s1_);
  ++steps_;
  return {s1_.h.values().begin(), s1_.h.values().end()};
}

TrainResult train_autoencoder(const std::vector<const Episode*>& train, const std::vector<const Episode*>& val,
                              const EmbedConfig& config, const std::vector<std::string>& features,
                              const std::string& prep_hash) {
  config.validate();
  if (train.empty()) throw DataError("no training episodes for the embedding");
  for (const auto* ep : train) {
    if (ep->length() == 0 || ep->features.front().size() != features.size()) {
      throw DimensionError("episode '" + ep->patient_id + "' does not match the feature layout");
    }
  }
  TrainResult result{EmbedModel(config.arch, features, config.hidden, config.seed, prep_hash), {}, 0, false};
  EmbedModel& model = result.model;
  const auto& monitor = val.empty() ? train : val;

  auto params = model.parameters();
  nn::AdamConfig adam;
  adam.lr = config.lr;
  auto state = nn::make_adam_state(params, adam);
  std::mt19937_64 rng(derive_seed(config.seed, 1, label_salt("embed-shuffle")));

  double best = model.reconstruction_mse(monitor);
  result.curve.push_back({0, model.reconstruction_mse(train), best});
  std::vector<Tensor> best_values;
  for (auto* p : params) best_values.push_back(p->value);
  std::size_t stall = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    CompensatedSum epoch_loss;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const Episode*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(train[order[i]]);
      }
      const double loss = model.loss_and_grad(batch);
      if (!std::isfinite(loss)) {
        throw NumericError("embedding loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      nn::adam_step(params, state);
      epoch_loss.add(loss);
      ++batches;
    }
    const double monitored = model.reconstruction_mse(monitor);
    result.curve.push_back({epoch, epoch_loss.value() / static_cast<double>(batches), monitored});
    if (monitored < best) {
      best = monitored;
      result.best_epoch = epoch;
      for (std::size_t i = 0; i < params.size(); ++i) best_values[i] = params[i]->value;
      stall = 0;
    } else if (++stall >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  return result;
}

std::vector<Tensor> embed_all(const EmbedModel& model, const std::vector<const Episode*>& episodes,
                              std::size_t threads) {
  std::vector<Tensor> out(episodes.size());
  parallel_for(
      episodes.size(), [&](std::size_t i) { out[i] = model.embed_sequence(episodes[i]->features); }, threads);
  return out;
}

}  // namespace hemorl::embed
