#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemorl/agent/agent.hpp"
#include "hemorl/cohort/cohort.hpp"
#include "hemorl/discretize/discretize.hpp"
#include "hemorl/embed/embed.hpp"
#include "hemorl/metrics/metrics.hpp"
#include "hemorl/ope/ope.hpp"
#include "hemorl/reward/reward.hpp"

namespace hemorl::harness {

inline constexpr int kRecordSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

/// Environment variable naming the default output root of the CLI.
inline constexpr const char* kOutputEnv = "HEMORL_OUTPUT";

enum class SourceKind { simulate, ingest };

struct DataSource {
  SourceKind kind = SourceKind::simulate;
  cohort::SimParams sim;
  std::filesystem::path events;       // ingest only
  std::filesystem::path static_csv;   // ingest only
};

/// One cell of the sensitivity grid: one value per axis plus every
/// hyperparameter. Defaults are the desk-scale profile.
struct ExperimentConfig {
  DataSource source;
  double bin_hours = 1.0;
  bool include_history = true;
  embed::Arch embedding = embed::Arch::lstm;
  reward::RewardSpec reward;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

  discretize::DiscretizeConfig discretize;  // bin_hours / include_history come from the axes above
  embed::EmbedConfig embed;                 // arch comes from `embedding`
  reward::MortConfig mort;
  agent::TrainConfig agent;                 // seed comes from `seeds`
  ope::BehaviorConfig behavior;
  double eval_epsilon = ope::kEvalEpsilon;
  std::size_t n_boot = 1000;
  std::uint64_t boot_seed = 0;
  /// Monte Carlo rollouts of the selected policy on the simulator; 0 skips.
  std::size_t ground_truth_rollouts = 0;

  std::size_t threads = 1;  // not part of the hash

  void validate() const;
  /// Short human label, e.g. "1h-hist-lstm-short" or "4h-nohist-gru-long-c10".
  std::string label() const;

  discretize::DiscretizeConfig discretize_config() const;
  embed::EmbedConfig embed_config() const;
  agent::TrainConfig agent_config(std::uint64_t seed) const;
};

/// Desk scale: 200 simulated patients, hidden 32, 20k agent steps.
ExperimentConfig desk_config();

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical hash over every field except `threads`, with seeds sorted.
std::string config_hash(const ExperimentConfig& c);

nlohmann::json sim_params_to_json(const cohort::SimParams& p);
cohort::SimParams sim_params_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  std::string snapshot_id;  // network checkpoint sha256
  double selection_value = 0.0;
  double mean_q = 0.0;  // mean max_a Q over test states
  double wdr = std::numeric_limits<double>::quiet_NaN();
  double wdr_ess = std::numeric_limits<double>::quiet_NaN();
  metrics::ActionDistribution dist;
  double mean_vaso_bin = 0.0;
  double mean_iv_bin = 0.0;
};

struct EvalReport {
  ope::SelectMethod method = ope::SelectMethod::wdr;
  std::size_t selected = 0;
  std::vector<SeedResult> seeds;
  std::vector<std::string> test_patients;
  metrics::ActionSets policy_actions;     // selected policy on the test split
  metrics::ActionSets physician_actions;
  metrics::ActionDistribution policy, physician;
  std::array<metrics::CI, 5> policy_iv, policy_vaso, physician_iv, physician_vaso;
  std::array<metrics::RiskRatio, 5> rr_iv, rr_vaso;
  std::array<metrics::CI, 5> diff_iv, diff_vaso;  // paired policy - physician
  metrics::InitiationRate init_policy_vaso, init_physician_vaso, init_policy_iv, init_physician_iv;
  std::array<metrics::CvCell, 25> restart_cv{};
  double max_cv = std::numeric_limits<double>::quiet_NaN();
  double q_spread = std::numeric_limits<double>::quiet_NaN();  // (max - min) / |mean| of seed mean_q
  std::vector<metrics::Subgroup> sub_policy, sub_physician;
  double behavior_train_accuracy = 0.0, behavior_val_accuracy = 0.0;
  /// Selected policy: WDR with a bootstrap SE over test trajectories.
  double selected_wdr = std::numeric_limits<double>::quiet_NaN();
  double selected_wdr_se = std::numeric_limits<double>::quiet_NaN();
  std::optional<cohort::ValueEstimate> ground_truth;
};

nlohmann::json to_json(const EvalReport& r);

enum class Stage { data, dataset, embed, mortality, behavior, agent, evaluate };
std::string_view to_string(Stage s) noexcept;

struct RunRecord {
  std::string config_hash;
  std::string label;
  nlohmann::json config;
  bool ok = false;
  std::string failed_stage;
  std::string error;
  std::vector<std::string> snapshot_ids;  // per seed, in config order
  std::optional<EvalReport> eval;
  std::vector<std::string> stages_run;     // stage keys computed in this call
  std::vector<std::string> stages_cached;  // stage keys loaded from the cache
  double wall_clock_seconds = 0.0;
};

nlohmann::json to_json(const RunRecord& r);

/// Runs or loads every stage under `out/cache/<stage>/<hash>` and writes
/// `out/runs/<config hash>/record.json`; appends to `out/results.jsonl`. A
/// stage failure comes back as a record with ok = false; invalid config
/// throws ConfigError. With `until` before evaluate the pipeline stops after
/// that stage and nothing is written outside the cache.
RunRecord run_experiment(const ExperimentConfig& config, const std::filesystem::path& out,
                         Stage until = Stage::evaluate);

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

struct GridSpec {
  ExperimentConfig base;
  std::vector<double> bin_hours = {1.0, 4.0};
  std::vector<bool> include_history = {true, false};
  std::vector<embed::Arch> embedding = {embed::Arch::lstm, embed::Arch::gru};
  std::vector<reward::RewardSpec> rewards;  // empty: short-term plus long-term C in {1, 10, 100}
  std::size_t max_cells = 64;
};

/// Cartesian product in axis order (bin, history, embedding, reward).
std::vector<ExperimentConfig> expand_grid(const GridSpec& grid);

struct GridResult {
  std::vector<RunRecord> records;
  std::filesystem::path report_dir;
  std::vector<std::filesystem::path> files;
};

/// Runs every cell (one failure never stops the rest), writes
/// out/manifest.json atomically and the report under out/report.
GridResult sensitivity_grid(const std::vector<ExperimentConfig>& cells, const std::filesystem::path& out);

/// Writes report.md plus CSV tables into `dir`, then re-reads every CSV to
/// check it parses. Returns the files written. Nothing time- or
/// path-dependent goes into the report.
std::vector<std::filesystem::path> write_report(const std::vector<nlohmann::json>& records,
                                                const std::filesystem::path& dir);
std::vector<std::filesystem::path> write_report(const std::vector<RunRecord>& records,
                                                const std::filesystem::path& dir);

/// Loads every runs/*/record.json under `out`, sorted by label then hash.
std::vector<nlohmann::json> load_records(const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// Online policy
// ---------------------------------------------------------------------------

/// Epsilon-soft greedy policy on Q(embed(history)) for simulator rollouts.
/// Features and embeddings are built bin by bin exactly as offline.
cohort::BinPolicyFactory learned_policy_factory(const discretize::Prep& prep, const embed::EmbedModel& embed,
                                                const agent::QNetwork& q, double epsilon);

/// Per-bin rewards of a finished rollout, rebinned and embedded as offline.
cohort::RewardFn rollout_reward_fn(const discretize::Prep& prep, const embed::EmbedModel& embed,
                                   const reward::RewardSpec& spec, const reward::MortModel* mort);

}  // namespace hemorl::harness
