#include "hemorl/agent/agent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hemorl/nnkit/checkpoint.hpp"
#include "hemorl/nnkit/optim.hpp"
#include "hemorl/util.hpp"

namespace hemorl::agent {

using nn::LayerSpec;
using nn::Tensor;

std::vector<double> dueling_combine(double value, std::span<const double> advantage) {
  if (advantage.empty()) throw DimensionError("dueling_combine: empty advantage");
  const double mean = compensated_sum(advantage) / static_cast<double>(advantage.size());
  std::vector<double> q(advantage.size());
  for (std::size_t a = 0; a < q.size(); ++a) q[a] = value + advantage[a] - mean;
  return q;
}

// ---------------------------------------------------------------- QNetwork

namespace {

std::vector<LayerSpec> trunk_specs(std::size_t in, std::size_t hidden) {
  return {LayerSpec::dense(in, hidden), LayerSpec::batchnorm(hidden), LayerSpec::leaky_relu(hidden),
          LayerSpec::dense(hidden, hidden), LayerSpec::batchnorm(hidden), LayerSpec::leaky_relu(hidden)};
}

// Columns [begin, begin + width) of x.
Tensor columns(const Tensor& x, std::size_t begin, std::size_t width) {
  Tensor out = Tensor::matrix(x.rows(), width);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) = x.at(r, begin + c);
  }
  return out;
}

Tensor combine(const Tensor& v, const Tensor& a) {
  const std::size_t n = a.cols();
  Tensor q = Tensor::matrix(a.rows(), n);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = dueling_combine(v.at(r, 0), a.row_span(r));
    for (std::size_t c = 0; c < n; ++c) q.at(r, c) = row[c];
  }
  return q;
}

}  // namespace

QNetwork::QNetwork(std::size_t state_dim, std::uint64_t seed, std::size_t hidden, std::size_t num_actions)
    : hidden_(hidden), num_actions_(num_actions), seed_(seed) {
  if (state_dim == 0) throw DimensionError("QNetwork: state dimension must be positive");
  if (hidden < 2 || hidden % 2 != 0) throw ConfigError("QNetwork: hidden width must be even and >= 2");
  if (num_actions < 2) throw ConfigError("QNetwork: need at least two actions");
  trunk_ = nn::Sequential(trunk_specs(state_dim, hidden), derive_seed(seed, 0), "q.trunk");
  value_ = nn::Sequential({LayerSpec::dense(hidden / 2, 1)}, derive_seed(seed, 1), "q.value");
  advantage_ = nn::Sequential({LayerSpec::dense(hidden / 2, num_actions)}, derive_seed(seed, 2), "q.advantage");
}

Tensor QNetwork::forward(const Tensor& states, nn::Mode mode) {
  const Tensor h = trunk_.forward(states, mode);
  const std::size_t half = hidden_ / 2;
  const Tensor v = value_.forward(columns(h, 0, half), mode);
  const Tensor a = advantage_.forward(columns(h, half, half), mode);
  return combine(v, a);
}

Tensor QNetwork::infer(const Tensor& states) const {
  const Tensor h = trunk_.infer(states);
  const std::size_t half = hidden_ / 2;
  return combine(value_.infer(columns(h, 0, half)), advantage_.infer(columns(h, half, half)));
}

void QNetwork::backward(const Tensor& grad_q) {
  if (grad_q.rank() != 2 || grad_q.cols() != num_actions_) {
    throw DimensionError("QNetwork::backward: gradient shape " + nn::shape_string(grad_q.shape()));
  }
  const std::size_t b = grad_q.rows();
  const double n = static_cast<double>(num_actions_);
  Tensor dv = Tensor::matrix(b, 1);
  Tensor da = Tensor::matrix(b, num_actions_);
  for (std::size_t r = 0; r < b; ++r) {
    const double sum = compensated_sum(grad_q.row_span(r));
    dv.at(r, 0) = sum;
    for (std::size_t c = 0; c < num_actions_; ++c) da.at(r, c) = grad_q.at(r, c) - sum / n;
  }
  const Tensor dhv = value_.backward(dv);
  const Tensor dha = advantage_.backward(da);
  const std::size_t half = hidden_ / 2;
  Tensor dh = Tensor::matrix(b, hidden_);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < half; ++c) {
      dh.at(r, c) = dhv.at(r, c);
      dh.at(r, half + c) = dha.at(r, c);
    }
  }
  trunk_.backward(dh);
}

std::vector<double> QNetwork::q_values(std::span<const double> state) const {
  if (state.size() != state_dim()) {
    throw DimensionError("state has " + std::to_string(state.size()) + " values, network expects " +
                         std::to_string(state_dim()));
  }
  const Tensor q = infer(Tensor::row(std::vector<double>(state.begin(), state.end())));
  return {q.values().begin(), q.values().end()};
}

std::vector<nn::Parameter*> QNetwork::parameters() {
  auto p = trunk_.parameters();
  for (auto* x : value_.parameters()) p.push_back(x);
  for (auto* x : advantage_.parameters()) p.push_back(x);
  return p;
}

std::vector<const nn::Parameter*> QNetwork::parameters() const {
  auto p = trunk_.parameters();
  for (const auto* x : value_.parameters()) p.push_back(x);
  for (const auto* x : advantage_.parameters()) p.push_back(x);
  return p;
}

void QNetwork::zero_grad() {
  trunk_.zero_grad();
  value_.zero_grad();
  advantage_.zero_grad();
}

void QNetwork::copy_values_from(const QNetwork& other) {
  trunk_.copy_values_from(other.trunk_);
  value_.copy_values_from(other.value_);
  advantage_.copy_values_from(other.advantage_);
}

nlohmann::json QNetwork::checkpoint_json() const {
  nn::CheckpointHeader header;
  header.layers = trunk_.specs();
  header.layers.push_back(value_.specs().front());
  header.layers.push_back(advantage_.specs().front());
  header.seed = seed_;
  header.extra = {{"kind", "qnet"}, {"state_dim", state_dim()}, {"hidden", hidden_}, {"num_actions", num_actions_}};
  return nn::checkpoint_to_json(header, parameters());
}

QNetwork QNetwork::from_checkpoint_json(const nlohmann::json& j) {
  const auto ckpt = nn::checkpoint_from_json(j);
  const auto& extra = ckpt.header.extra;
  if (!extra.contains("kind") || extra.at("kind") != "qnet") throw DataError("not a Q-network checkpoint");
  QNetwork net(extra.at("state_dim").get<std::size_t>(), ckpt.header.seed, extra.at("hidden").get<std::size_t>(),
               extra.at("num_actions").get<std::size_t>());
  nn::restore_parameters(ckpt, net.parameters());
  return net;
}

std::size_t argmax(std::span<const double> q) {
  if (q.empty()) throw DimensionError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t a = 1; a < q.size(); ++a) {
    if (q[a] > q[best]) best = a;
  }
  return best;
}

std::size_t greedy_action(const QNetwork& net, std::span<const double> state) { return argmax(net.q_values(state)); }

std::vector<double> epsilon_soft(std::span<const double> q, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
  std::vector<double> p(q.size(), epsilon / static_cast<double>(q.size()));
  p[argmax(q)] += 1.0 - epsilon;
  return p;
}

// ---------------------------------------------------------------- SumTree

SumTree::SumTree(std::size_t capacity) : capacity_(capacity), leaves_(1) {
  if (capacity == 0) throw ConfigError("SumTree capacity must be positive");
  while (leaves_ < capacity) leaves_ *= 2;
  nodes_.assign(2 * leaves_, 0.0);
}

void SumTree::set(std::size_t i, double value) {
  if (i >= capacity_) throw DataError("SumTree index " + std::to_string(i) + " out of range");
  if (!(value >= 0.0) || !std::isfinite(value)) throw NumericError("SumTree value must be finite and >= 0");
  std::size_t node = leaves_ + i;
  nodes_[node] = value;
  for (node /= 2; node >= 1; node /= 2) nodes_[node] = nodes_[2 * node] + nodes_[2 * node + 1];
}

double SumTree::get(std::size_t i) const {
  if (i >= capacity_) throw DataError("SumTree index " + std::to_string(i) + " out of range");
  return nodes_[leaves_ + i];
}

std::size_t SumTree::find(double u) const {
  if (!(total() > 0.0)) throw StateError("SumTree is empty");
  u = std::clamp(u, 0.0, std::nextafter(total(), 0.0));
  std::size_t node = 1;
  while (node < leaves_) {
    const std::size_t left = 2 * node;
    if (u < nodes_[left] || nodes_[left + 1] <= 0.0) {
      node = left;
    } else {
      u -= nodes_[left];
      node = left + 1;
    }
  }
  std::size_t i = node - leaves_;
  // Rounding can land on a zero leaf at the far end; step back to a live one.
  while (i > 0 && (i >= capacity_ || nodes_[leaves_ + i] <= 0.0)) --i;
  return i;
}

// ---------------------------------------------------------------- replay

void PerConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("PER alpha must be >= 0");
  if (!(beta0 >= 0.0 && beta0 <= 1.0)) throw ConfigError("PER beta0 must lie in [0, 1]");
  if (!(eps > 0.0)) throw ConfigError("PER eps must be positive");
}

void TransitionSet::add(std::span<const double> s, int a, double r, std::span<const double> s_next, bool done) {
  if (s.size() != state_dim || s_next.size() != state_dim) throw DimensionError("transition state width mismatch");
  if (a < 0) throw DataError("negative action index");
  states.insert(states.end(), s.begin(), s.end());
  next_states.insert(next_states.end(), s_next.begin(), s_next.end());
  actions.push_back(a);
  rewards.push_back(r);
  terminal.push_back(done ? 1 : 0);
}

TransitionSet build_transitions(const std::vector<const discretize::Episode*>& episodes,
                                const std::vector<Tensor>& embeddings,
                                const std::vector<std::vector<double>>& rewards) {
  if (episodes.size() != embeddings.size() || episodes.size() != rewards.size()) {
    throw DimensionError("build_transitions: episodes, embeddings and rewards differ in count");
  }
  if (episodes.empty()) throw DataError("build_transitions: no episodes");
  TransitionSet set(embeddings.front().cols());
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = *episodes[e];
    const Tensor& emb = embeddings[e];
    const std::size_t t_len = ep.length();
    if (emb.rows() != t_len || rewards[e].size() != t_len || emb.cols() != set.state_dim) {
      throw DimensionError("build_transitions: episode " + ep.patient_id + " has inconsistent lengths");
    }
    for (std::size_t t = 0; t < t_len; ++t) {
      const bool done = t + 1 == t_len;
      set.add(emb.row_span(t), ep.actions[t], rewards[e][t], emb.row_span(done ? t : t + 1), done);
    }
  }
  return set;
}

ReplayBuffer::ReplayBuffer(const TransitionSet& data, PerConfig config)
    : data_(&data), config_(config), tree_(std::max<std::size_t>(1, data.size())) {
  config_.validate();
  if (data.size() == 0) throw DataError("replay buffer needs at least one transition");
  priority_.assign(data.size(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) set_priority(i, max_priority_);
}

void ReplayBuffer::set_priority(std::size_t i, double p) {
  priority_[i] = p;
  tree_.set(i, std::pow(p, config_.alpha));
  max_priority_ = std::max(max_priority_, p);
}

double ReplayBuffer::priority(std::size_t i) const {
  if (i >= size()) throw DataError("unknown transition id " + std::to_string(i));
  return priority_[i];
}

double ReplayBuffer::probability(std::size_t i) const {
  if (i >= size()) throw DataError("unknown transition id " + std::to_string(i));
  return tree_.get(i) / tree_.total();
}

PerSample ReplayBuffer::sample(std::size_t batch, double beta, std::mt19937_64& rng) const {
  if (batch == 0) throw ConfigError("batch size must be positive");
  // Stratified: one draw from each of `batch` equal slices of the priority mass.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double slice = tree_.total() / static_cast<double>(batch);
  PerSample out;
  out.ids.resize(batch);
  out.weights.resize(batch);
  const double n = static_cast<double>(size());
  double wmax = 0.0;
  for (std::size_t k = 0; k < batch; ++k) {
    const std::size_t i = tree_.find((static_cast<double>(k) + u(rng)) * slice);
    out.ids[k] = i;
    out.weights[k] = std::pow(n * tree_.get(i) / tree_.total(), -beta);
    wmax = std::max(wmax, out.weights[k]);
  }
  for (double& w : out.weights) w /= wmax;
  return out;
}

void ReplayBuffer::update(std::span<const std::size_t> ids, std::span<const double> td_errors) {
  if (ids.size() != td_errors.size()) throw DimensionError("ids and TD errors differ in length");
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= size()) throw DataError("unknown transition id " + std::to_string(ids[k]));
    if (!std::isfinite(td_errors[k])) throw NumericError("non-finite TD error");
  }
  for (std::size_t k = 0; k < ids.size(); ++k) set_priority(ids[k], std::abs(td_errors[k]) + config_.eps);
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (target_sync == 0) throw ConfigError("target sync period must be positive");
  if (log_every == 0) throw ConfigError("log_every must be positive");
  if (!(divergence_loss > 0.0)) throw ConfigError("divergence bound must be positive");
  per.validate();
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"gamma", c.gamma},
          {"lr", c.lr},
          {"target_sync", c.target_sync},
          {"seed", c.seed},
          {"per", {{"alpha", c.per.alpha}, {"beta0", c.per.beta0}, {"eps", c.per.eps}}},
          {"double_q", c.double_q},
          {"hidden", c.hidden},
          {"num_actions", c.num_actions},
          {"log_every", c.log_every},
          {"divergence_loss", c.divergence_loss}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.gamma = j.value("gamma", c.gamma);
  c.lr = j.value("lr", c.lr);
  c.target_sync = j.value("target_sync", c.target_sync);
  c.seed = j.value("seed", c.seed);
  if (j.contains("per")) {
    const auto& p = j.at("per");
    c.per.alpha = p.value("alpha", c.per.alpha);
    c.per.beta0 = p.value("beta0", c.per.beta0);
    c.per.eps = p.value("eps", c.per.eps);
  }
  c.double_q = j.value("double_q", c.double_q);
  c.hidden = j.value("hidden", c.hidden);
  c.num_actions = j.value("num_actions", c.num_actions);
  c.log_every = j.value("log_every", c.log_every);
  c.divergence_loss = j.value("divergence_loss", c.divergence_loss);
  c.validate();
  return c;
}

Tensor gather_states(const TransitionSet& data, std::span<const std::size_t> ids, bool next) {
  Tensor out = Tensor::matrix(ids.size(), data.state_dim);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto row = next ? data.next_state(ids[k]) : data.state(ids[k]);
    std::copy(row.begin(), row.end(), out.values().begin() + static_cast<std::ptrdiff_t>(k * data.state_dim));
  }
  return out;
}

std::vector<double> ddqn_targets(const TransitionSet& data, std::span<const std::size_t> ids, const QNetwork& online,
                                 const QNetwork& target, double gamma, bool double_q) {
  const Tensor next = gather_states(data, ids, true);
  const Tensor qt = target.infer(next);
  Tensor qo;
  if (double_q) qo = online.infer(next);
  std::vector<double> y(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const std::size_t i = ids[k];
    y[k] = data.rewards[i];
    if (data.terminal[i]) continue;
    const std::size_t a_star = argmax(double_q ? qo.row_span(k) : qt.row_span(k));
    y[k] += gamma * qt.at(k, a_star);
  }
  return y;
}

nlohmann::json log_record_to_json(const LogRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"mean_abs_td", r.mean_abs_td}, {"mean_q", r.mean_q}};
}

namespace {

LogRecord log_record_from_json(const nlohmann::json& j) {
  return {j.at("step").get<std::size_t>(), j.at("loss").get<double>(), j.at("mean_abs_td").get<double>(),
          j.at("mean_q").get<double>()};
}

double mean_max_q(const QNetwork& net, const Tensor& probe) {
  const Tensor q = net.infer(probe);
  CompensatedSum s;
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const auto row = q.row_span(r);
    s.add(*std::max_element(row.begin(), row.end()));
  }
  return s.value() / static_cast<double>(q.rows());
}

}  // namespace

PolicySnapshot train(const TransitionSet& data, const TrainConfig& config, const Tensor& probe_in) {
  config.validate();
  if (data.size() == 0) throw DataError("training needs at least one transition");
  for (int a : data.actions) {
    if (a < 0 || static_cast<std::size_t>(a) >= config.num_actions) {
      throw DataError("action index " + std::to_string(a) + " outside the action space");
    }
  }
  Tensor probe = probe_in;
  if (probe.empty()) {
    std::vector<std::size_t> ids(std::min<std::size_t>(256, data.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    probe = gather_states(data, ids, false);
  }
  if (probe.cols() != data.state_dim) throw DimensionError("probe states have the wrong width");

  QNetwork online(data.state_dim, derive_seed(config.seed, 0, label_salt("qnet")), config.hidden, config.num_actions);
  QNetwork target = online;
  ReplayBuffer buffer(data, config.per);
  std::mt19937_64 rng(derive_seed(config.seed, 1, label_salt("per")));
  const auto params = online.parameters();
  nn::AdamConfig adam;
  adam.lr = config.lr;
  auto adam_state = nn::make_adam_state(params, adam);

  std::vector<LogRecord> log;
  CompensatedSum loss_acc, td_acc;
  std::size_t since_log = 0;
  const std::size_t b = config.batch_size;
  const double span = config.steps > 1 ? static_cast<double>(config.steps - 1) : 1.0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const double beta = config.per.beta0 + (1.0 - config.per.beta0) * static_cast<double>(step) / span;
    const PerSample batch = buffer.sample(b, beta, rng);
    const auto y = ddqn_targets(data, batch.ids, online, target, config.gamma, config.double_q);

    online.zero_grad();
    const Tensor q = online.forward(gather_states(data, batch.ids, false), nn::Mode::train);
    Tensor grad = Tensor::matrix(b, config.num_actions);
    std::vector<double> td(b);
    CompensatedSum loss;
    for (std::size_t k = 0; k < b; ++k) {
      const auto a = static_cast<std::size_t>(data.actions[batch.ids[k]]);
      td[k] = q.at(k, a) - y[k];
      loss.add(batch.weights[k] * td[k] * td[k]);
      grad.at(k, a) = 2.0 * batch.weights[k] * td[k] / static_cast<double>(b);
    }
    const double batch_loss = loss.value() / static_cast<double>(b);
    if (!std::isfinite(batch_loss) || batch_loss > config.divergence_loss) {
      throw DivergenceError("Q-network training diverged at step " + std::to_string(step) +
                                " (loss " + std::to_string(batch_loss) + ")",
                            log);
    }
    online.backward(grad);
    nn::adam_step(params, adam_state);
    buffer.update(batch.ids, td);

    loss_acc.add(batch_loss);
    for (double d : td) td_acc.add(std::abs(d) / static_cast<double>(b));
    ++since_log;
    if ((step + 1) % config.target_sync == 0) target.copy_values_from(online);
    if ((step + 1) % config.log_every == 0 || step + 1 == config.steps) {
      const double n = static_cast<double>(since_log);
      log.push_back({step + 1, loss_acc.value() / n, td_acc.value() / n, mean_max_q(online, probe)});
      loss_acc = {};
      td_acc = {};
      since_log = 0;
    }
  }
  return PolicySnapshot{std::move(online), config, {}, nlohmann::json::object(), std::move(log)};
}

// ---------------------------------------------------------------- snapshot

void PolicySnapshot::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const std::string ckpt = network.checkpoint_json().dump();
  write_file_atomic(dir / "qnet.json", ckpt);
  nlohmann::json side = {{"config", train_config_to_json(config)},
                         {"embed_hash", embed_hash},
                         {"reward_spec", reward_spec},
                         {"network_sha256", sha256_hex(ckpt)},
                         {"log", nlohmann::json::array()}};
  for (const auto& r : log) side["log"].push_back(log_record_to_json(r));
  write_file_atomic(dir / "snapshot.json", side.dump(2));
}

PolicySnapshot PolicySnapshot::load(const std::filesystem::path& dir) {
  const std::string ckpt = read_file(dir / "qnet.json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(dir / "snapshot.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "snapshot.json").string() + ": " + e.what());
  }
  if (side.at("network_sha256").get<std::string>() != sha256_hex(ckpt)) {
    throw DataError(dir.string() + ": Q-network checkpoint does not match its sidecar");
  }
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(ckpt);
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "qnet.json").string() + ": " + e.what());
  }
  PolicySnapshot snap{QNetwork::from_checkpoint_json(cj), train_config_from_json(side.at("config")),
                      side.at("embed_hash").get<std::string>(), side.at("reward_spec"), {}};
  for (const auto& r : side.at("log")) snap.log.push_back(log_record_from_json(r));
  return snap;
}

}  // namespace hemorl::agent
