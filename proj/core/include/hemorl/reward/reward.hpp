#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hemorl/cohort/cohort.hpp"
#include "hemorl/discretize/discretize.hpp"
#include "hemorl/nnkit/layers.hpp"

namespace hemorl::reward {

inline constexpr double kProbClamp = 1e-6;
inline constexpr double kThirtyDays = 24.0 * 30.0;

/// 1 if the patient died within 30 days of admission.
int mortality_label(const cohort::Outcome& outcome);

struct MortConfig {
  double l1 = 1e-4;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// State -> P(death within 30 days): Dense(in, 50), LeakyReLU, Dense(50, 30),
/// LeakyReLU, Dense(30, 1), sigmoid.
class MortModel {
 public:
  MortModel(std::size_t input_dim, std::uint64_t seed);

  std::size_t input_dim() const { return net_.in_dim(); }
  /// Pre-sigmoid output.
  double logit(std::span<const double> state) const;
  double probability(std::span<const double> state) const;
  /// Probabilities for every row of `states`.
  std::vector<double> probabilities(const nn::Tensor& states) const;

  nn::Sequential& net() noexcept { return net_; }
  const nn::Sequential& net() const noexcept { return net_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static MortModel load(const std::filesystem::path& path);

 private:
  nn::Sequential net_;
};

struct MortTrainResult {
  MortModel model;
  double val_auc = 0.0;
  double val_loss = 0.0;  // mean cross-entropy, no penalty
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
};

/// Minimises mean binary cross-entropy + l1 * sum|W| with Adam. Keeps the
/// weights with the lowest validation cross-entropy. A single-class training
/// set is an error.
MortTrainResult train_mortality_model(const nn::Tensor& x_train, const std::vector<int>& y_train,
                                      const nn::Tensor& x_val, const std::vector<int>& y_val, const MortConfig& config);

/// Area under the ROC curve; tied scores count one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Clamps into [1e-6, 1 - 1e-6]. Sets *clamped when that changed the value.
double clamp_probability(double p, bool* clamped = nullptr);
double logit(double p);

/// -logit(f_next) + logit(f), natural log, after clamping both.
double short_term_reward(double f, double f_next, bool* clamped = nullptr);

/// ln(1 + (M - Y) / C) for one-year survivors, else ln(H / 8760 + 1).
double long_term_utility(double worst_sofa, double final_sofa, double hours_survived, double c);

enum class RewardKind { short_term, long_term };
std::string_view to_string(RewardKind kind) noexcept;
RewardKind reward_kind_from_string(std::string_view s);

struct RewardSpec {
  RewardKind kind = RewardKind::short_term;
  double c = 10.0;  // long-term only
  double worst_sofa = cohort::kWorstSofa;

  void validate() const;
};

/// r_t = -logit(p_{t+1}) + logit(p_t) for t < T-1 and 0 at the last bin.
/// `probs` are the mortality probabilities of S_0..S_{T-1}.
std::vector<double> short_term_rewards(std::span<const double> probs, std::size_t* n_clamped = nullptr);

/// Utility at the last bin, 0 elsewhere.
std::vector<double> long_term_rewards(const discretize::Episode& episode, const RewardSpec& spec);

struct RewardTable {
  std::vector<std::vector<double>> rewards;  // one per episode, length = bins
  std::size_t clamped = 0;                   // probabilities that needed clamping
};

/// Short-term needs `embeddings` (T x hidden per episode) and `mort`.
RewardTable attach_rewards(const std::vector<const discretize::Episode*>& episodes, const RewardSpec& spec,
                           const std::vector<nn::Tensor>* embeddings = nullptr, const MortModel* mort = nullptr);

}  // namespace hemorl::reward
