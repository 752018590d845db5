#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hemorl/agent/agent.hpp"
#include "hemorl/nnkit/layers.hpp"

namespace hemorl::ope {

inline constexpr double kProbFloor = 1e-4;
inline constexpr double kEvalEpsilon = 0.01;

struct BehaviorConfig {
  std::size_t hidden = 64;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  double floor = kProbFloor;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Softmax classifier Dense(d,64), LReLU, Dense(64,64), LReLU, Dense(64,25).
/// Probabilities are floored: p' = (1 - n * floor) p + floor.
class BehaviorModel {
 public:
  BehaviorModel(std::size_t input_dim, std::uint64_t seed, std::size_t hidden = 64,
                std::size_t num_actions = agent::kNumActions, double floor = kProbFloor);

  std::size_t input_dim() const { return net_.in_dim(); }
  std::size_t num_actions() const { return net_.out_dim(); }
  double floor() const noexcept { return floor_; }

  /// Floored probabilities for one state.
  std::vector<double> probabilities(std::span<const double> state) const;
  /// Floored probabilities, one row per state.
  nn::Tensor probabilities(const nn::Tensor& states) const;
  /// Softmax without the floor.
  nn::Tensor raw_probabilities(const nn::Tensor& states) const;

  nn::Sequential& net() noexcept { return net_; }
  const nn::Sequential& net() const noexcept { return net_; }

  void save(const std::filesystem::path& path) const;
  static BehaviorModel load(const std::filesystem::path& path);

 private:
  nn::Sequential net_;
  double floor_;
};

struct ReliabilityBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct BehaviorFit {
  BehaviorModel model;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;  // NaN without validation data
  double val_nll = 0.0;
  std::vector<ReliabilityBin> calibration;  // 10 bins of top-1 confidence on the validation (else training) set
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
};

/// Cross-entropy with Adam, keeping the best validation-NLL weights. A
/// dataset with a single distinct action is an error.
BehaviorFit fit_behavior_policy(const nn::Tensor& states, std::span<const int> actions, const nn::Tensor& val_states,
                                std::span<const int> val_actions, const BehaviorConfig& config);

double top1_accuracy(const nn::Tensor& probs, std::span<const int> actions);
std::vector<ReliabilityBin> reliability(const nn::Tensor& probs, std::span<const int> actions, std::size_t bins = 10);

/// Per step of one logged trajectory: the logged action and reward, the
/// evaluation and behaviour probabilities and the Q estimates for every action.
struct OpeTrajectory {
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::vector<double>> pi_e;
  std::vector<std::vector<double>> pi_b;
  std::vector<std::vector<double>> q;

  std::size_t length() const noexcept { return actions.size(); }
};

struct WdrEstimate {
  double value = 0.0;
  std::vector<double> contributions;  // per trajectory, summing to value
  double ess = 0.0;                   // (sum rho)^2 / sum rho^2 of the full-horizon ratios
  double max_weight = 0.0;            // largest normalised full-horizon weight
  double max_rho = 0.0;               // largest unnormalised cumulative ratio
  std::size_t n = 0;
};

/// Weighted doubly robust estimate, per-decision form:
///
///   WDR = sum_i sum_t gamma^t [ w_t^i r_t^i - w_t^i Q(s_t^i, a_t^i) + w_{t-1}^i V(s_t^i) ]
///
/// with rho_t^i = prod_{k<=t} pi_e(a_k|s_k) / pi_b(a_k|s_k), w_t^i = rho_t^i /
/// sum_j rho_t^j, w_{-1}^i = 1/n and V(s) = sum_a pi_e(a|s) Q(s, a). A
/// trajectory that has ended keeps its last rho and contributes nothing after
/// its end. Per-trajectory terms are summed with compensated summation in
/// trajectory order.
WdrEstimate wdr_value(const std::vector<OpeTrajectory>& trajectories, double gamma);

/// Per-decision weighted importance sampling (WDR with Q = 0).
double weighted_is_value(const std::vector<OpeTrajectory>& trajectories, double gamma);

/// Logged test episodes with their embeddings and rewards.
struct EvalData {
  std::vector<const discretize::Episode*> episodes;
  std::vector<nn::Tensor> embeddings;
  std::vector<std::vector<double>> rewards;

  void validate() const;
  /// Every state row of every episode.
  nn::Tensor all_states() const;
};

/// pi_e is epsilon-soft greedy on the snapshot's Q; Q estimates come from the same network.
std::vector<OpeTrajectory> build_trajectories(const agent::QNetwork& q, const BehaviorModel& behavior,
                                              const EvalData& data, double epsilon = kEvalEpsilon);

/// Mean over `states` of max_a Q(s, a).
double mean_max_q(const agent::QNetwork& q, const nn::Tensor& states);

enum class SelectMethod { wdr, mean_q };
std::string_view to_string(SelectMethod m) noexcept;
SelectMethod select_method_from_string(std::string_view s);

/// Index of the largest value; ties go to the candidate with the lowest seed.
std::size_t argmax_lowest_seed(std::span<const double> values, std::span<const std::uint64_t> seeds);

struct Selection {
  std::size_t index = 0;
  SelectMethod method = SelectMethod::wdr;
  std::vector<double> values;
  std::vector<WdrEstimate> wdr;  // filled for the wdr method
};

Selection select_restart(const std::vector<const agent::PolicySnapshot*>& snapshots, SelectMethod method,
                         const EvalData& data, const BehaviorModel* behavior, double gamma,
                         double epsilon = kEvalEpsilon);

}  // namespace hemorl::ope
