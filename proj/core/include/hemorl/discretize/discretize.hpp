#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemorl/cohort/cohort.hpp"

namespace hemorl::discretize {

inline constexpr int kNumActions = 25;
inline constexpr int kSchemaVersion = 1;

struct Bin {
  double start = 0.0;
  double end = 0.0;
  /// In-bin measurements (name, value) in time order.
  std::vector<std::pair<std::string, double>> measurements;
  /// Dose delivered over the bin divided by its duration.
  double iv = 0.0;
  double vaso = 0.0;

  double duration() const noexcept { return end - start; }
  friend bool operator==(const Bin&, const Bin&) = default;
};

struct BinnedTrajectory {
  std::string patient_id;
  cohort::StaticFeatures statics;
  cohort::Outcome outcome;
  double bin_hours = 4.0;
  std::vector<Bin> bins;
};

struct RebinOptions {
  double bin_hours = 4.0;  // 1 or 4
  /// Restart the grid at each truncation point. When false the nominal
  /// k * bin_hours grid is kept and truncated bins are followed by a short
  /// bin up to the next grid point.
  bool re_anchor = true;
};

/// Episode end: 72 h for ICU survivors, else the time of death.
double episode_end(const cohort::EventLog& log);

/// Splits the ICU stay into bins. A treatment change strictly inside a bin
/// truncates it at that time; a measurement at m goes to the bin with
/// start < m <= end (the first bin also takes m = 0).
BinnedTrajectory rebin(const cohort::EventLog& log, const RebinOptions& options);

/// Builds one bin [start, end] straight from a log, with the same membership
/// and rate rules as rebin(). Used by online policies.
Bin make_bin(const cohort::EventLog& log, double start, double end);

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

/// Quartile cuts over nonzero rates of one treatment. A rate equal to a cut
/// goes to the higher bin: bin = 1 + #{cuts <= rate}, and rate 0 is bin 0.
struct TreatmentBins {
  std::array<double, 3> cuts{};
  /// Dose used when an action is replayed; [0] is always 0.
  std::array<double, 5> representative{};
  /// True when fewer than 4 distinct nonzero rates were available.
  bool degenerate = false;

  int bin_of(double rate) const;
  friend bool operator==(const TreatmentBins&, const TreatmentBins&) = default;
};

/// numpy-style linear percentile (type 7) of unsorted data, q in [0, 100].
double percentile_linear(std::vector<double> xs, double q);

/// Fits cuts on the nonzero entries of `rates`; representatives are the
/// median fitted rate within each bin. All-zero input is an error.
TreatmentBins fit_treatment_bins(std::span<const double> rates);

struct ActionBinning {
  TreatmentBins iv;
  TreatmentBins vaso;

  /// iv_bin * 5 + vaso_bin. Negative rates are an error.
  int encode(double iv_rate, double vaso_rate) const;
  cohort::ActionRates action_rates() const;
  friend bool operator==(const ActionBinning&, const ActionBinning&) = default;
};

/// Fits both treatments on the per-bin rates of `trajectories`.
ActionBinning fit_action_bins(std::span<const BinnedTrajectory> trajectories);

inline int iv_bin_of(int action) { return action / 5; }
inline int vaso_bin_of(int action) { return action % 5; }

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Feature layout: for each channel mean/max/min, then age, weight,
/// elixhauser, then (optionally) cumulative iv and vasopressor dose through
/// the previous bin.
std::vector<std::string> feature_names(const std::vector<std::string>& channels, bool include_history);

/// x_std = (x - mean) / scale. History features have mean 0, so the first
/// bin always standardises to (0, 0).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  std::vector<double> apply(std::span<const double> raw) const;
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

struct DiscretizeConfig {
  double bin_hours = 4.0;
  bool re_anchor = true;
  bool include_history = false;
  double train_ratio = 0.8;
  double val_fraction = 0.1;  // of the training side, for early stopping
  std::uint64_t seed = 0;
  std::vector<std::string> channels;  // empty: every channel seen in training

  void validate() const;
};

struct Split {
  std::vector<std::string> train;  // excludes val
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Everything needed to encode new data identically: fitted on training
/// patients only.
struct Prep {
  DiscretizeConfig config;
  std::vector<std::string> channels;
  std::vector<std::string> features;
  Standardizer standardizer;
  ActionBinning binning;
  Split split;

  std::size_t sofa_channel() const;  // index into channels, or npos
  std::size_t num_features() const { return features.size(); }
};

nlohmann::json prep_to_json(const Prep& prep);
Prep prep_from_json(const nlohmann::json& j);
std::string prep_hash(const Prep& prep);

/// Incremental feature construction, shared by the offline pipeline and
/// online policies. Missing channels are forward-filled, else take the
/// training mean.
class FeatureBuilder {
 public:
  FeatureBuilder(const Prep& prep, const cohort::StaticFeatures& statics);

  /// Raw (unstandardised) features for the next bin. Unobserved channels
  /// come back as NaN. Unknown channel names are an error.
  std::vector<double> push_raw(const Bin& bin);
  /// Standardised features for the next bin.
  std::vector<double> push(const Bin& bin);
  /// Last known SOFA reading, NaN if none yet.
  double last_sofa() const noexcept { return last_sofa_; }
  std::size_t bins_seen() const noexcept { return bins_; }

 private:
  const Prep* prep_;
  cohort::StaticFeatures statics_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> last_mean_, last_max_, last_min_;
  std::vector<bool> seen_;
  double cum_iv_ = 0.0;
  double cum_vaso_ = 0.0;
  double last_sofa_;
  std::size_t bins_ = 0;
};

struct Episode {
  std::string patient_id;
  std::vector<double> bin_start;
  std::vector<double> bin_end;
  std::vector<std::vector<double>> features;  // T x F, standardised
  std::vector<int> actions;                   // a_t: rates over bin t+1; last bin repeats its own
  std::vector<double> iv_rate;                // in effect over bin t
  std::vector<double> vaso_rate;
  std::vector<double> sofa;                   // last known raw SOFA, NaN if none
  cohort::Outcome outcome;

  std::size_t length() const noexcept { return actions.size(); }
  bool terminal(std::size_t t) const noexcept { return t + 1 == actions.size(); }
  friend bool operator==(const Episode&, const Episode&) = default;
};

Episode featurize(const BinnedTrajectory& traj, const Prep& prep);

/// Patient-level split: lround(ratio * n) patients train, clamped to leave
/// both sides non-empty. Deterministic given seed.
std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(std::vector<std::string> ids,
                                                                            double ratio, std::uint64_t seed);

struct Dataset {
  Prep prep;
  std::vector<Episode> train;
  std::vector<Episode> val;
  std::vector<Episode> test;
  std::vector<std::string> warnings;

  /// train then val: the full training side.
  std::vector<const Episode*> training_side() const;
};

/// Rebins, splits, fits the standardiser and action bins on the training
/// side, and featurises every patient.
Dataset build_dataset(const std::vector<cohort::EventLog>& logs, const DiscretizeConfig& config, std::size_t threads = 0);

/// episodes.jsonl + prep.json in `dir`.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

nlohmann::json episode_to_json(const Episode& ep, std::string_view split);
Episode episode_from_json(const nlohmann::json& j);

}  // namespace hemorl::discretize
