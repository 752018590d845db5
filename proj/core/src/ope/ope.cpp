#include "hemorl/ope/ope.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "hemorl/errors.hpp"
#include "hemorl/nnkit/checkpoint.hpp"
#include "hemorl/nnkit/optim.hpp"
#include "hemorl/util.hpp"

namespace hemorl::ope {

using nn::LayerSpec;
using nn::Tensor;

// ---------------------------------------------------------------- behaviour model

void BehaviorConfig::validate() const {
  if (hidden == 0) throw ConfigError("behaviour model hidden width must be positive");
  if (!(lr > 0.0)) throw ConfigError("behaviour model learning rate must be positive");
  if (batch_size == 0) throw ConfigError("behaviour model batch size must be positive");
  if (!(floor >= 0.0 && floor * static_cast<double>(agent::kNumActions) < 1.0)) {
    throw ConfigError("probability floor must lie in [0, 1/25)");
  }
}

namespace {

Tensor softmax_rows(const Tensor& z) {
  Tensor p = Tensor::matrix(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto row = z.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += (p.at(r, c) = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < row.size(); ++c) p.at(r, c) /= s;
  }
  return p;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out = Tensor::matrix(idx.size(), x.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto row = x.row_span(idx[k]);
    std::copy(row.begin(), row.end(), out.values().begin() + static_cast<std::ptrdiff_t>(k * x.cols()));
  }
  return out;
}

// Mean negative log-likelihood; fills d(loss)/d(logits) when asked.
double cross_entropy(const Tensor& logits, std::span<const int> actions, Tensor* grad) {
  const Tensor p = softmax_rows(logits);
  const double n = static_cast<double>(actions.size());
  CompensatedSum loss;
  if (grad) *grad = p;
  for (std::size_t r = 0; r < actions.size(); ++r) {
    const auto a = static_cast<std::size_t>(actions[r]);
    loss.add(-std::log(std::max(p.at(r, a), std::numeric_limits<double>::min())));
    if (grad) {
      grad->at(r, a) -= 1.0;
      for (std::size_t c = 0; c < p.cols(); ++c) grad->at(r, c) /= n;
    }
  }
  return loss.value() / n;
}

}  // namespace

BehaviorModel::BehaviorModel(std::size_t input_dim, std::uint64_t seed, std::size_t hidden, std::size_t num_actions,
                             double floor)
    : net_({LayerSpec::dense(input_dim, hidden), LayerSpec::leaky_relu(hidden), LayerSpec::dense(hidden, hidden),
            LayerSpec::leaky_relu(hidden), LayerSpec::dense(hidden, num_actions)},
           seed, "behavior"),
      floor_(floor) {
  if (!(floor >= 0.0 && floor * static_cast<double>(num_actions) < 1.0)) {
    throw ConfigError("probability floor must lie in [0, 1/actions)");
  }
}

Tensor BehaviorModel::raw_probabilities(const Tensor& states) const { return softmax_rows(net_.infer(states)); }

Tensor BehaviorModel::probabilities(const Tensor& states) const {
  Tensor p = raw_probabilities(states);
  const double scale = 1.0 - floor_ * static_cast<double>(p.cols());
  for (double& v : p.values()) v = scale * v + floor_;
  return p;
}

std::vector<double> BehaviorModel::probabilities(std::span<const double> state) const {
  if (state.size() != input_dim()) throw DimensionError("behaviour model: state width mismatch");
  const Tensor p = probabilities(Tensor::row(std::vector<double>(state.begin(), state.end())));
  return {p.values().begin(), p.values().end()};
}

void BehaviorModel::save(const std::filesystem::path& path) const {
  nn::CheckpointHeader header;
  header.layers = net_.specs();
  header.seed = net_.seed();
  header.extra = {{"kind", "behavior"}, {"floor", floor_}};
  nn::save_checkpoint(path, header, net_.parameters());
}

BehaviorModel BehaviorModel::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (ckpt.header.extra.value("kind", "") != "behavior") {
    throw DataError(path.string() + " is not a behaviour-model checkpoint");
  }
  const auto& layers = ckpt.header.layers;
  if (layers.size() != 5) throw DataError(path.string() + ": unexpected behaviour-model architecture");
  BehaviorModel m(layers.front().in_dim, ckpt.header.seed, layers.front().out_dim, layers.back().out_dim,
                  ckpt.header.extra.at("floor").get<double>());
  if (m.net().specs() != layers) throw DataError(path.string() + ": unexpected behaviour-model architecture");
  nn::restore_parameters(ckpt, m.net().parameters());
  return m;
}

double top1_accuracy(const Tensor& probs, std::span<const int> actions) {
  if (probs.rows() != actions.size()) throw DimensionError("top1_accuracy: rows and actions differ");
  if (actions.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hit = 0;
  for (std::size_t r = 0; r < actions.size(); ++r) {
    hit += agent::argmax(probs.row_span(r)) == static_cast<std::size_t>(actions[r]);
  }
  return static_cast<double>(hit) / static_cast<double>(actions.size());
}

std::vector<ReliabilityBin> reliability(const Tensor& probs, std::span<const int> actions, std::size_t bins) {
  if (bins == 0) throw ConfigError("reliability needs at least one bin");
  std::vector<ReliabilityBin> out(bins);
  std::vector<double> conf(bins, 0.0), hits(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = static_cast<double>(b) / static_cast<double>(bins);
    out[b].hi = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (std::size_t r = 0; r < actions.size(); ++r) {
    const auto row = probs.row_span(r);
    const std::size_t top = agent::argmax(row);
    const auto b = std::min(bins - 1, static_cast<std::size_t>(row[top] * static_cast<double>(bins)));
    ++out[b].count;
    conf[b] += row[top];
    hits[b] += top == static_cast<std::size_t>(actions[r]);
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (out[b].count == 0) continue;
    out[b].mean_confidence = conf[b] / static_cast<double>(out[b].count);
    out[b].accuracy = hits[b] / static_cast<double>(out[b].count);
  }
  return out;
}

BehaviorFit fit_behavior_policy(const Tensor& states, std::span<const int> actions, const Tensor& val_states,
                                std::span<const int> val_actions, const BehaviorConfig& config) {
  config.validate();
  if (states.rows() != actions.size() || val_states.rows() != val_actions.size()) {
    throw DimensionError("behaviour fit: states and actions differ in length");
  }
  if (actions.empty()) throw DataError("behaviour fit: no training states");
  const std::size_t n_actions = agent::kNumActions;
  for (auto span : {actions, val_actions}) {
    for (int a : span) {
      if (a < 0 || static_cast<std::size_t>(a) >= n_actions) {
        throw DataError("behaviour fit: action index " + std::to_string(a) + " outside 0..24");
      }
    }
  }
  if (std::all_of(actions.begin(), actions.end(), [&](int a) { return a == actions.front(); })) {
    throw DataError("behaviour fit: the training data contain a single action");
  }

  BehaviorFit fit{BehaviorModel(states.cols(), config.seed, config.hidden, n_actions, config.floor), 0.0, 0.0, 0.0, {}, 0, 0};
  auto& net = fit.model.net();
  const auto params = net.parameters();
  nn::AdamConfig adam;
  adam.lr = config.lr;
  auto state = nn::make_adam_state(params, adam);
  std::mt19937_64 rng(derive_seed(config.seed, 1, label_salt("behavior-shuffle")));

  const bool has_val = val_states.rows() > 0;
  const Tensor& xm = has_val ? val_states : states;
  const std::span<const int> ym = has_val ? val_actions : actions;
  auto monitor = [&] { return cross_entropy(net.infer(xm), ym, nullptr); };

  double best = monitor();
  std::vector<Tensor> best_values;
  for (auto* p : params) best_values.push_back(p->value);
  std::size_t stall = 0;
  std::vector<std::size_t> order(states.rows());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      std::vector<int> ab;
      for (std::size_t i : idx) ab.push_back(actions[i]);
      net.zero_grad();
      const Tensor z = net.forward(gather_rows(states, idx), nn::Mode::train);
      Tensor dz;
      const double loss = cross_entropy(z, ab, &dz);
      if (!std::isfinite(loss)) throw NumericError("behaviour loss is not finite at epoch " + std::to_string(epoch));
      net.backward(dz);
      nn::adam_step(params, state);
    }
    fit.epochs = epoch;
    const double m = monitor();
    if (m < best) {
      best = m;
      fit.best_epoch = epoch;
      for (std::size_t i = 0; i < params.size(); ++i) best_values[i] = params[i]->value;
      stall = 0;
    } else if (++stall >= config.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  fit.val_nll = best;
  fit.train_accuracy = top1_accuracy(fit.model.probabilities(states), actions);
  fit.val_accuracy = has_val ? top1_accuracy(fit.model.probabilities(val_states), val_actions)
                             : std::numeric_limits<double>::quiet_NaN();
  fit.calibration = reliability(fit.model.probabilities(xm), ym);
  return fit;
}

// ---------------------------------------------------------------- WDR

namespace {

void check_trajectory(const OpeTrajectory& tr, std::size_t i) {
  const std::size_t t_len = tr.length();
  if (t_len == 0) throw DataError("trajectory " + std::to_string(i) + " is empty");
  if (tr.rewards.size() != t_len || tr.pi_e.size() != t_len || tr.pi_b.size() != t_len || tr.q.size() != t_len) {
    throw DimensionError("trajectory " + std::to_string(i) + ": horizons of actions, rewards, policies and Q differ");
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    const std::size_t n = tr.pi_e[t].size();
    if (tr.pi_b[t].size() != n || tr.q[t].size() != n) {
      throw DimensionError("trajectory " + std::to_string(i) + ": action-space width differs at step " +
                           std::to_string(t));
    }
    const int a = tr.actions[t];
    if (a < 0 || static_cast<std::size_t>(a) >= n) throw DataError("trajectory action outside the action space");
    if (!(tr.pi_b[t][static_cast<std::size_t>(a)] > 0.0)) {
      throw NumericError("behaviour probability of a logged action is zero");
    }
  }
}

struct Weights {
  std::vector<std::vector<double>> rho;  // rho[i][t] for t < max horizon; held after the end
  std::size_t horizon = 0;
};

Weights cumulative_ratios(const std::vector<OpeTrajectory>& trs) {
  Weights w;
  for (const auto& tr : trs) w.horizon = std::max(w.horizon, tr.length());
  w.rho.resize(trs.size());
  for (std::size_t i = 0; i < trs.size(); ++i) {
    const auto& tr = trs[i];
    auto& r = w.rho[i];
    r.resize(w.horizon);
    double c = 1.0;
    for (std::size_t t = 0; t < w.horizon; ++t) {
      if (t < tr.length()) {
        const auto a = static_cast<std::size_t>(tr.actions[t]);
        c *= tr.pi_e[t][a] / tr.pi_b[t][a];
      }
      r[t] = c;
    }
  }
  return w;
}

WdrEstimate estimate(const std::vector<OpeTrajectory>& trs, double gamma, bool use_q) {
  if (trs.empty()) throw DataError("off-policy evaluation needs at least one trajectory");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  for (std::size_t i = 0; i < trs.size(); ++i) check_trajectory(trs[i], i);
  const Weights w = cumulative_ratios(trs);
  const std::size_t n = trs.size();

  std::vector<double> norm(w.horizon);
  for (std::size_t t = 0; t < w.horizon; ++t) {
    CompensatedSum s;
    for (std::size_t i = 0; i < n; ++i) s.add(w.rho[i][t]);
    norm[t] = s.value();
    if (!(norm[t] > 0.0) || !std::isfinite(norm[t])) {
      throw NumericError("importance weights vanish or overflow at step " + std::to_string(t));
    }
  }

  WdrEstimate est;
  est.n = n;
  est.contributions.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tr = trs[i];
    CompensatedSum c;
    double discount = 1.0;
    double w_prev = 1.0 / static_cast<double>(n);
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const double wt = w.rho[i][t] / norm[t];
      c.add(discount * wt * tr.rewards[t]);
      if (use_q) {
        const auto a = static_cast<std::size_t>(tr.actions[t]);
        double v = 0.0;
        for (std::size_t b = 0; b < tr.q[t].size(); ++b) v += tr.pi_e[t][b] * tr.q[t][b];
        c.add(-discount * wt * tr.q[t][a]);
        c.add(discount * w_prev * v);
      }
      w_prev = wt;
      discount *= gamma;
    }
    est.contributions[i] = c.value();
  }
  est.value = compensated_sum(est.contributions);

  CompensatedSum s1, s2;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = w.rho[i].back();
    s1.add(r);
    s2.add(r * r);
    est.max_rho = std::max(est.max_rho, r);
    est.max_weight = std::max(est.max_weight, r / norm.back());
  }
  est.ess = s1.value() * s1.value() / s2.value();
  return est;
}

}  // namespace

WdrEstimate wdr_value(const std::vector<OpeTrajectory>& trajectories, double gamma) {
  return estimate(trajectories, gamma, true);
}

double weighted_is_value(const std::vector<OpeTrajectory>& trajectories, double gamma) {
  return estimate(trajectories, gamma, false).value;
}

// ---------------------------------------------------------------- evaluation data

void EvalData::validate() const {
  if (episodes.empty()) throw DataError("evaluation data is empty");
  if (embeddings.size() != episodes.size() || rewards.size() != episodes.size()) {
    throw DimensionError("evaluation data: episodes, embeddings and rewards differ in count");
  }
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const std::size_t t_len = episodes[i]->length();
    if (embeddings[i].rows() != t_len || rewards[i].size() != t_len) {
      throw DimensionError("evaluation data: episode " + episodes[i]->patient_id + " has inconsistent lengths");
    }
  }
}

Tensor EvalData::all_states() const {
  validate();
  std::size_t rows = 0;
  for (const auto& e : embeddings) rows += e.rows();
  const std::size_t d = embeddings.front().cols();
  Tensor out = Tensor::matrix(rows, d);
  std::size_t r = 0;
  for (const auto& e : embeddings) {
    std::copy(e.values().begin(), e.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(r * d));
    r += e.rows();
  }
  return out;
}

std::vector<OpeTrajectory> build_trajectories(const agent::QNetwork& q, const BehaviorModel& behavior,
                                              const EvalData& data, double epsilon) {
  data.validate();
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("evaluation epsilon must lie in (0, 1]");
  if (q.num_actions() != behavior.num_actions()) throw DimensionError("Q network and behaviour model action spaces differ");
  std::vector<OpeTrajectory> out(data.episodes.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& ep = *data.episodes[i];
    const Tensor qv = q.infer(data.embeddings[i]);
    const Tensor pb = behavior.probabilities(data.embeddings[i]);
    auto& tr = out[i];
    tr.actions = ep.actions;
    tr.rewards = data.rewards[i];
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const auto row = qv.row_span(t);
      tr.q.emplace_back(row.begin(), row.end());
      tr.pi_e.push_back(agent::epsilon_soft(row, epsilon));
      const auto prow = pb.row_span(t);
      tr.pi_b.emplace_back(prow.begin(), prow.end());
    }
  }
  return out;
}

double mean_max_q(const agent::QNetwork& q, const Tensor& states) {
  if (states.rows() == 0) throw DataError("mean_max_q: no states");
  const Tensor qv = q.infer(states);
  CompensatedSum s;
  for (std::size_t r = 0; r < qv.rows(); ++r) {
    const auto row = qv.row_span(r);
    s.add(*std::max_element(row.begin(), row.end()));
  }
  return s.value() / static_cast<double>(qv.rows());
}

std::string_view to_string(SelectMethod m) noexcept { return m == SelectMethod::wdr ? "wdr" : "mean_q"; }

SelectMethod select_method_from_string(std::string_view s) {
  if (s == "wdr") return SelectMethod::wdr;
  if (s == "mean_q") return SelectMethod::mean_q;
  throw ConfigError("unknown selection method '" + std::string(s) + "' (expected wdr or mean_q)");
}

std::size_t argmax_lowest_seed(std::span<const double> values, std::span<const std::uint64_t> seeds) {
  if (values.empty()) throw DataError("restart selection needs at least one candidate");
  if (seeds.size() != values.size()) throw DimensionError("one seed per candidate is required");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best] || (values[i] == values[best] && seeds[i] < seeds[best])) best = i;
  }
  return best;
}

Selection select_restart(const std::vector<const agent::PolicySnapshot*>& snapshots, SelectMethod method,
                         const EvalData& data, const BehaviorModel* behavior, double gamma, double epsilon) {
  if (snapshots.empty()) throw DataError("restart selection needs at least one snapshot");
  if (method == SelectMethod::wdr && !behavior) throw ConfigError("WDR selection needs a behaviour model");
  Selection sel;
  sel.method = method;
  std::vector<std::uint64_t> seeds;
  const Tensor states = method == SelectMethod::mean_q ? data.all_states() : Tensor{};
  for (const auto* snap : snapshots) {
    seeds.push_back(snap->config.seed);
    if (method == SelectMethod::wdr) {
      sel.wdr.push_back(wdr_value(build_trajectories(snap->network, *behavior, data, epsilon), gamma));
      sel.values.push_back(sel.wdr.back().value);
    } else {
      sel.values.push_back(mean_max_q(snap->network, states));
    }
  }
  sel.index = argmax_lowest_seed(sel.values, seeds);
  return sel;
}

}  // namespace hemorl::ope
