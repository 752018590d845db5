#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemorl/discretize/discretize.hpp"
#include "hemorl/errors.hpp"
#include "hemorl/nnkit/layers.hpp"

namespace hemorl::agent {

inline constexpr std::size_t kNumActions = 25;

/// Q_a = V + A_a - mean(A).
std::vector<double> dueling_combine(double value, std::span<const double> advantage);

/// Trunk Dense(d,h), BN, LReLU, Dense(h,h), BN, LReLU. The first half of the
/// trunk output feeds the value head Dense(h/2, 1), the second half the
/// advantage head Dense(h/2, actions).
class QNetwork {
 public:
  QNetwork(std::size_t state_dim, std::uint64_t seed, std::size_t hidden = 128, std::size_t num_actions = kNumActions);

  std::size_t state_dim() const { return trunk_.in_dim(); }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t num_actions() const noexcept { return num_actions_; }
  std::uint64_t seed() const noexcept { return seed_; }

  /// batch x actions. Train mode records what backward() needs.
  nn::Tensor forward(const nn::Tensor& states, nn::Mode mode);
  /// Eval-mode forward; const and thread safe.
  nn::Tensor infer(const nn::Tensor& states) const;
  /// Accumulates gradients from d(loss)/dQ.
  void backward(const nn::Tensor& grad_q);

  std::vector<double> q_values(std::span<const double> state) const;

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  void zero_grad();
  void copy_values_from(const QNetwork& other);

  nlohmann::json checkpoint_json() const;
  static QNetwork from_checkpoint_json(const nlohmann::json& j);

 private:
  std::size_t hidden_;
  std::size_t num_actions_;
  std::uint64_t seed_;
  nn::Sequential trunk_;
  nn::Sequential value_;
  nn::Sequential advantage_;
};

/// Lowest index among the maxima.
std::size_t argmax(std::span<const double> q);
std::size_t greedy_action(const QNetwork& net, std::span<const double> state);
/// epsilon/n on every action plus 1 - epsilon on the greedy one.
std::vector<double> epsilon_soft(std::span<const double> q, double epsilon);

/// Binary tree of partial sums over a fixed number of leaves. Every update
/// recomputes the ancestors from their children, so the root never drifts.
class SumTree {
 public:
  explicit SumTree(std::size_t capacity);

  std::size_t capacity() const noexcept { return capacity_; }
  void set(std::size_t i, double value);
  double get(std::size_t i) const;
  double total() const noexcept { return nodes_[1]; }
  /// Leaf i with prefix(i) <= u < prefix(i) + value(i); u is clamped into [0, total).
  std::size_t find(double u) const;

 private:
  std::size_t capacity_;
  std::size_t leaves_;  // power of two >= capacity
  std::vector<double> nodes_;
};

struct PerConfig {
  double alpha = 0.6;
  double beta0 = 0.4;  // annealed linearly to 1 over training
  double eps = 0.01;

  void validate() const;
};

/// Flat store of (s, a, r, s', terminal).
struct TransitionSet {
  std::size_t state_dim = 0;
  std::vector<double> states;
  std::vector<double> next_states;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminal;

  explicit TransitionSet(std::size_t dim = 0) : state_dim(dim) {}
  std::size_t size() const noexcept { return actions.size(); }
  void add(std::span<const double> s, int a, double r, std::span<const double> s_next, bool done);
  std::span<const double> state(std::size_t i) const { return {states.data() + i * state_dim, state_dim}; }
  std::span<const double> next_state(std::size_t i) const {
    return {next_states.data() + i * state_dim, state_dim};
  }
};

/// One transition per bin; the last bin of each episode is terminal.
TransitionSet build_transitions(const std::vector<const discretize::Episode*>& episodes,
                                const std::vector<nn::Tensor>& embeddings,
                                const std::vector<std::vector<double>>& rewards);

struct PerSample {
  std::vector<std::size_t> ids;
  std::vector<double> weights;  // (N P(i))^-beta / max over the batch
};

/// Proportional prioritised replay over a fixed TransitionSet.
class ReplayBuffer {
 public:
  ReplayBuffer(const TransitionSet& data, PerConfig config);

  std::size_t size() const noexcept { return data_->size(); }
  const TransitionSet& data() const noexcept { return *data_; }
  const PerConfig& config() const noexcept { return config_; }

  /// Raw priority p_i (before the alpha power).
  double priority(std::size_t i) const;
  /// P(i) = p_i^alpha / sum_j p_j^alpha.
  double probability(std::size_t i) const;
  double total() const noexcept { return tree_.total(); }

  /// Stratified proportional sampling: draw k lands in slice k of the total
  /// priority mass, so each draw still has marginal probability P(i).
  PerSample sample(std::size_t batch, double beta, std::mt19937_64& rng) const;
  /// p_i = |delta_i| + eps.
  void update(std::span<const std::size_t> ids, std::span<const double> td_errors);

 private:
  void set_priority(std::size_t i, double p);

  const TransitionSet* data_;
  PerConfig config_;
  SumTree tree_;
  std::vector<double> priority_;
  double max_priority_ = 1.0;
};

struct TrainConfig {
  std::size_t steps = 100000;
  std::size_t batch_size = 30;
  double gamma = 0.99;
  double lr = 1e-4;
  std::size_t target_sync = 1000;
  std::uint64_t seed = 0;
  PerConfig per;
  bool double_q = true;  // false: y = r + gamma max_a Q_target(s', a)
  std::size_t hidden = 128;
  std::size_t num_actions = kNumActions;
  std::size_t log_every = 1000;
  double divergence_loss = 1e6;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Targets for a batch: terminal -> r, otherwise r + gamma Q_target(s', a*) with
/// a* the online argmax (double) or the target argmax (vanilla).
std::vector<double> ddqn_targets(const TransitionSet& data, std::span<const std::size_t> ids, const QNetwork& online,
                                 const QNetwork& target, double gamma, bool double_q = true);

struct LogRecord {
  std::size_t step = 0;
  double loss = 0.0;       // mean weighted squared TD error since the last record
  double mean_abs_td = 0.0;
  double mean_q = 0.0;     // mean max_a Q over the probe states
};

nlohmann::json log_record_to_json(const LogRecord& r);

struct PolicySnapshot {
  QNetwork network;
  TrainConfig config;
  std::string embed_hash;
  nlohmann::json reward_spec = nlohmann::json::object();
  std::vector<LogRecord> log;

  std::size_t act(std::span<const double> state) const { return greedy_action(network, state); }
  /// Writes qnet.json (checkpoint) and snapshot.json (sidecar) into `dir`.
  void save(const std::filesystem::path& dir) const;
  static PolicySnapshot load(const std::filesystem::path& dir);
};

/// Thrown when the loss turns non-finite or exceeds the configured bound.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::vector<LogRecord> log) : NumericError(what), log_(std::move(log)) {}
  const std::vector<LogRecord>& log() const noexcept { return log_; }

 private:
  std::vector<LogRecord> log_;
};

/// Offline training over `data`. `probe` (rows of states) drives the mean-Q
/// diagnostic; an empty tensor falls back to the first transitions' states.
PolicySnapshot train(const TransitionSet& data, const TrainConfig& config, const nn::Tensor& probe = {});

/// Rows of `data` states selected by `ids`.
nn::Tensor gather_states(const TransitionSet& data, std::span<const std::size_t> ids, bool next);

}  // namespace hemorl::agent
