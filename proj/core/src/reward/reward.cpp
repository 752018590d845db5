#include "hemorl/reward/reward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "hemorl/errors.hpp"
#include "hemorl/nnkit/checkpoint.hpp"
#include "hemorl/nnkit/optim.hpp"
#include "hemorl/util.hpp"

namespace hemorl::reward {

using nn::Tensor;

int mortality_label(const cohort::Outcome& outcome) { return outcome.hours_survived < kThirtyDays ? 1 : 0; }

void MortConfig::validate() const {
  if (!(l1 >= 0.0) || !std::isfinite(l1)) throw ConfigError("l1 penalty must be finite and >= 0");
  if (!(lr > 0.0)) throw ConfigError("mortality learning rate must be > 0");
  if (batch_size == 0) throw ConfigError("mortality batch size must be > 0");
}

namespace {

std::vector<nn::LayerSpec> mort_layers(std::size_t in) {
  return {nn::LayerSpec::dense(in, 50), nn::LayerSpec::leaky_relu(50), nn::LayerSpec::dense(50, 30),
          nn::LayerSpec::leaky_relu(30), nn::LayerSpec::dense(30, 1)};
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Mean stable BCE-with-logits over rows of z (n x 1).
double bce(const Tensor& z, std::span<const int> y, Tensor* dz) {
  const std::size_t n = z.rows();
  CompensatedSum s;
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = z[i];
    const double yi = y[i];
    s.add(std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi))));
    if (dz) (*dz)[i] = (sigmoid(zi) - yi) / static_cast<double>(n);
  }
  return s.value() / static_cast<double>(n);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out = Tensor::matrix(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto r = x.row_span(idx[i]);
    std::copy(r.begin(), r.end(), out.values().begin() + static_cast<long>(i * x.cols()));
  }
  return out;
}

}  // namespace

MortModel::MortModel(std::size_t input_dim, std::uint64_t seed) : net_(mort_layers(input_dim), seed, "mort") {}

double MortModel::logit(std::span<const double> state) const {
  return net_.infer(Tensor::row(std::vector<double>(state.begin(), state.end())))[0];
}

double MortModel::probability(std::span<const double> state) const { return sigmoid(logit(state)); }

std::vector<double> MortModel::probabilities(const Tensor& states) const {
  const Tensor z = net_.infer(states);
  std::vector<double> p(z.rows());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(z[i]);
  return p;
}

void MortModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nn::CheckpointHeader header;
  header.layers = net_.specs();
  header.seed = net_.seed();
  header.extra = extra;
  header.extra["kind"] = "mort";
  nn::save_checkpoint(path, header, net_.parameters());
}

MortModel MortModel::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (!ckpt.header.extra.contains("kind") || ckpt.header.extra.at("kind") != "mort") {
    throw DataError(path.string() + " is not a mortality-model checkpoint");
  }
  if (ckpt.header.layers.empty()) throw DataError(path.string() + ": no layers");
  MortModel m(ckpt.header.layers.front().in_dim, ckpt.header.seed);
  if (m.net().specs() != ckpt.header.layers) throw DataError(path.string() + ": unexpected mortality architecture");
  nn::restore_parameters(ckpt, m.net().parameters());
  return m;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over ties, then Mann-Whitney U.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("roc_auc needs both classes");
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

MortTrainResult train_mortality_model(const Tensor& x_train, const std::vector<int>& y_train, const Tensor& x_val,
                                      const std::vector<int>& y_val, const MortConfig& config) {
  config.validate();
  if (x_train.rows() != y_train.size() || x_val.rows() != y_val.size()) {
    throw DimensionError("mortality training: states and labels differ in length");
  }
  if (x_train.rows() == 0) throw DataError("no mortality training states");
  std::size_t pos = 0;
  for (int y : y_train) {
    if (y != 0 && y != 1) throw DataError("mortality labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos == 0 || pos == y_train.size()) throw DataError("mortality training set has a single class");

  MortTrainResult res{MortModel(x_train.cols(), config.seed), 0.0, 0.0, 0, 0};
  auto& net = res.model.net();
  auto params = net.parameters();
  auto weights = net.weights();
  nn::AdamConfig adam;
  adam.lr = config.lr;
  auto state = nn::make_adam_state(params, adam);
  std::mt19937_64 rng(derive_seed(config.seed, 1, label_salt("mort-shuffle")));

  const bool has_val = x_val.rows() > 0;
  const Tensor& xm = has_val ? x_val : x_train;
  const std::vector<int>& ym = has_val ? y_val : y_train;
  auto monitor = [&] { return bce(net.infer(xm), ym, nullptr); };

  double best = monitor();
  std::vector<Tensor> best_values;
  for (auto* p : params) best_values.push_back(p->value);
  std::size_t stall = 0;
  std::vector<std::size_t> order(x_train.rows());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      std::vector<int> yb;
      for (std::size_t i : idx) yb.push_back(y_train[i]);
      net.zero_grad();
      const Tensor z = net.forward(gather_rows(x_train, idx), nn::Mode::train);
      Tensor dz = Tensor::matrix(z.rows(), 1);
      const double loss = bce(z, yb, &dz);
      if (!std::isfinite(loss)) throw NumericError("mortality loss is not finite at epoch " + std::to_string(epoch));
      net.backward(dz);
      nn::add_l1_subgradient(weights, config.l1);
      nn::adam_step(params, state);
    }
    res.epochs = epoch;
    const double m = monitor();
    if (m < best) {
      best = m;
      res.best_epoch = epoch;
      for (std::size_t i = 0; i < params.size(); ++i) best_values[i] = params[i]->value;
      stall = 0;
    } else if (++stall >= config.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  res.val_loss = best;
  if (has_val) {
    std::size_t vpos = 0;
    for (int y : y_val) vpos += static_cast<std::size_t>(y == 1);
    if (vpos > 0 && vpos < y_val.size()) {
      const auto p = res.model.probabilities(x_val);
      res.val_auc = roc_auc(p, y_val);
    } else {
      res.val_auc = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return res;
}

double clamp_probability(double p, bool* clamped) {
  if (!(p >= 0.0 && p <= 1.0)) throw DataError("probability must lie in [0, 1]");
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (clamped && q != p) *clamped = true;
  return q;
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

double short_term_reward(double f, double f_next, bool* clamped) {
  return -logit(clamp_probability(f_next, clamped)) + logit(clamp_probability(f, clamped));
}

double long_term_utility(double worst_sofa, double final_sofa, double hours_survived, double c) {
  if (!(c > 0.0)) throw ConfigError("C must be > 0");
  if (!(final_sofa >= 0.0)) throw DataError("final SOFA must be >= 0");
  if (final_sofa > worst_sofa) throw DataError("final SOFA exceeds the worst possible SOFA");
  if (!(hours_survived >= 0.0)) throw DataError("hours survived must be >= 0");
  if (hours_survived >= cohort::kHoursPerYear) return std::log1p((worst_sofa - final_sofa) / c);
  return std::log1p(hours_survived / cohort::kHoursPerYear);
}

std::string_view to_string(RewardKind kind) noexcept {
  return kind == RewardKind::short_term ? "short_term" : "long_term";
}

RewardKind reward_kind_from_string(std::string_view s) {
  if (s == "short_term") return RewardKind::short_term;
  if (s == "long_term") return RewardKind::long_term;
  throw ConfigError("unknown reward kind '" + std::string(s) + "'");
}

void RewardSpec::validate() const {
  if (kind == RewardKind::long_term && !(c > 0.0)) throw ConfigError("C must be > 0");
  if (!(worst_sofa > 0.0)) throw ConfigError("worst SOFA must be > 0");
}

std::vector<double> short_term_rewards(std::span<const double> probs, std::size_t* n_clamped) {
  std::vector<double> r(probs.size(), 0.0);
  std::vector<double> lg(probs.size());
  for (std::size_t t = 0; t < probs.size(); ++t) {
    bool c = false;
    lg[t] = logit(clamp_probability(probs[t], &c));
    if (c && n_clamped) ++*n_clamped;
  }
  for (std::size_t t = 0; t + 1 < probs.size(); ++t) r[t] = -lg[t + 1] + lg[t];
  return r;
}

std::vector<double> long_term_rewards(const discretize::Episode& episode, const RewardSpec& spec) {
  if (episode.length() == 0) throw DataError("episode '" + episode.patient_id + "' has no bins");
  const auto& o = episode.outcome;
  if (o.hours_survived < 0.0) throw DataError("episode '" + episode.patient_id + "' has no outcome");
  std::vector<double> r(episode.length(), 0.0);
  r.back() = long_term_utility(spec.worst_sofa, o.final_sofa, o.hours_survived, spec.c);
  return r;
}

RewardTable attach_rewards(const std::vector<const discretize::Episode*>& episodes, const RewardSpec& spec,
                           const std::vector<Tensor>* embeddings, const MortModel* mort) {
  spec.validate();
  RewardTable table;
  table.rewards.resize(episodes.size());
  if (spec.kind == RewardKind::long_term) {
    for (std::size_t i = 0; i < episodes.size(); ++i) table.rewards[i] = long_term_rewards(*episodes[i], spec);
    return table;
  }
  if (!embeddings || !mort) throw ConfigError("short-term rewards need embeddings and a mortality model");
  if (embeddings->size() != episodes.size()) throw DimensionError("one embedding tensor per episode is required");
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Tensor& e = (*embeddings)[i];
    if (e.rows() != episodes[i]->length()) throw DimensionError("embedding length differs from episode length");
    const auto p = mort->probabilities(e);
    table.rewards[i] = short_term_rewards(p, &table.clamped);
  }
  return table;
}

}  // namespace hemorl::reward
