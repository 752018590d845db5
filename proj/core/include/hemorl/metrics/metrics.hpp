#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemorl/agent/agent.hpp"
#include "hemorl/discretize/discretize.hpp"

namespace hemorl::metrics {

/// One action per bin, one vector per episode. Episodes are the bootstrap
/// clusters.
using ActionSets = std::vector<std::vector<int>>;

enum class Treatment { iv, vaso };
std::string_view to_string(Treatment t) noexcept;

/// Marginal category labels: No action, 1st..4th.
inline constexpr std::array<std::string_view, 5> kCategoryLabels = {"No action", "1st", "2nd", "3rd", "4th"};

struct ActionDistribution {
  std::array<std::array<std::uint64_t, 5>, 5> counts{};  // [iv_bin][vaso_bin]
  std::uint64_t total = 0;

  void add(int action);
  double frequency(int iv_bin, int vaso_bin) const;
  /// Flattened as iv_bin * 5 + vaso_bin. All zero when total is 0.
  std::array<double, 25> frequencies() const;
  std::array<double, 5> marginal(Treatment t) const;
  /// Share of person-times with the treatment at bin > 0.
  double nonzero_share(Treatment t) const;

  friend bool operator==(const ActionDistribution&, const ActionDistribution&) = default;
};

/// Counts every action of every episode. An empty set is an error.
ActionDistribution action_distribution(const ActionSets& sets);

/// Logged (physician) actions.
ActionSets physician_actions(const std::vector<const discretize::Episode*>& episodes);
/// Greedy actions of `net` on each row of each embedding.
ActionSets policy_actions(const agent::QNetwork& net, const std::vector<nn::Tensor>& embeddings);

nlohmann::json to_json(const ActionDistribution& d);

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct BootstrapConfig {
  std::size_t n_boot = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

/// Percentile interval. `bracketed` is false when the point falls outside
/// [lo, hi], which the percentile method does not rule out.
struct CI {
  double point = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  double level = 0.95;
  std::size_t n_boot = 0;
  double boot_mean = std::numeric_limits<double>::quiet_NaN();
  bool bracketed = true;
};

nlohmann::json to_json(const CI& ci);

/// Statistic over a resample: indices of the chosen clusters, repeats allowed.
using MultiStatistic = std::function<std::vector<double>(std::span<const std::size_t>)>;
using Statistic = std::function<double(std::span<const std::size_t>)>;

/// Cluster bootstrap: n_boot resamples of n clusters with replacement.
/// Replicate b draws from its own stream derive_seed(seed, b), so results do
/// not depend on the worker count. Returns replicates[b][k]. n < 2 is an error.
std::vector<std::vector<double>> bootstrap_replicates(std::size_t n_clusters, const MultiStatistic& stat,
                                                      const BootstrapConfig& cfg);

/// Percentile CI of replicate column `k` around `point`.
CI percentile_ci(const std::vector<std::vector<double>>& replicates, std::size_t k, double point, double level);

/// Point estimate on the identity resample plus a percentile CI.
CI bootstrap_ci(std::size_t n_clusters, const Statistic& stat, const BootstrapConfig& cfg);
std::vector<CI> bootstrap_cis(std::size_t n_clusters, const MultiStatistic& stat, const BootstrapConfig& cfg);

/// Marginal frequencies of one treatment with per-category CIs.
std::array<CI, 5> marginal_cis(const ActionSets& sets, Treatment t, const BootstrapConfig& cfg);

// ---------------------------------------------------------------------------
// Comparisons
// ---------------------------------------------------------------------------

struct RiskRatio {
  bool defined = false;  // false when the base frequency is 0
  double freq_new = 0.0;
  double freq_base = 0.0;
  CI rr;
};

/// freq_new / freq_base of one marginal category.
double risk_ratio(double freq_new, double freq_base);

/// Relative risk of `category` with a paired bootstrap: both sets describe the
/// same episodes, so one resample of episodes is applied to both.
RiskRatio relative_risk(const ActionSets& sets_new, const ActionSets& sets_base, Treatment t, int category,
                        const BootstrapConfig& cfg);

/// Paired difference freq_new - freq_base per category, with CIs.
std::array<CI, 5> paired_difference_cis(const ActionSets& sets_new, const ActionSets& sets_base, Treatment t,
                                        const BootstrapConfig& cfg);

/// Percentage points: 100 * (a - b) per marginal category.
std::array<double, 5> distribution_diff(const ActionDistribution& a, const ActionDistribution& b, Treatment t);

// ---------------------------------------------------------------------------
// Initiation
// ---------------------------------------------------------------------------

/// per_bin: events / bins at risk, where bin t is at risk when the previous
/// bin's treatment bin is 0 (the state before the first bin counts as
/// untreated) and an event is a nonzero bin at t.
/// per_episode: episodes with any treated bin / all episodes.
enum class InitiationVariant { per_bin, per_episode };

struct InitiationRate {
  bool defined = false;  // false with nothing at risk
  std::size_t events = 0;
  std::size_t at_risk = 0;
  CI rate;
};

InitiationRate initiation_rate(const ActionSets& sets, Treatment t, const BootstrapConfig& cfg,
                               InitiationVariant variant = InitiationVariant::per_bin);

// ---------------------------------------------------------------------------
// Restart variation
// ---------------------------------------------------------------------------

struct CvCell {
  double mean = 0.0;
  double sd = 0.0;  // sample sd (n - 1)
  double cv = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;  // false when the mean is 0
};

/// Per action cell, sd / mean of its frequency across restarts. Needs >= 2.
std::array<CvCell, 25> restart_cv(const std::vector<ActionDistribution>& restarts);
/// Largest defined c_v, NaN if none.
double max_cv(const std::array<CvCell, 25>& cells);

// ---------------------------------------------------------------------------
// Subgroups
// ---------------------------------------------------------------------------

/// Buckets are ordered; a SOFA value goes to the first one with value < hi
/// (value <= hi when hi_inclusive).
struct SofaBucket {
  std::string label;
  double hi = std::numeric_limits<double>::infinity();
  bool hi_inclusive = false;
};

/// <5, 5-15 (15 included), >15.
std::vector<SofaBucket> default_sofa_buckets();

struct Subgroup {
  SofaBucket bucket;
  ActionDistribution dist;
  bool empty = true;
};

/// Buckets person-times by their in-bin SOFA. `sofa` mirrors `sets`. A NaN
/// SOFA is an error.
std::vector<Subgroup> subgroup_distributions(const ActionSets& sets, const std::vector<std::vector<double>>& sofa,
                                             const std::vector<SofaBucket>& buckets = default_sofa_buckets());

/// In-bin SOFA of each episode.
std::vector<std::vector<double>> episode_sofa(const std::vector<const discretize::Episode*>& episodes);

/// Nonzero share of the policy over that of the baseline; NaN when the base is 0.
double nonzero_ratio(const ActionDistribution& policy, const ActionDistribution& base, Treatment t);

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// iv_bin,vaso_bin,count,frequency
std::string heatmap_csv(const ActionDistribution& d);
/// category,point,lo,hi; one row per category label.
std::string table_csv(const std::array<CI, 5>& rows);

}  // namespace hemorl::metrics
