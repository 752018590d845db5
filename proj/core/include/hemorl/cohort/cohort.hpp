#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hemorl::cohort {

inline constexpr double kIcuHours = 72.0;
inline constexpr double kHoursPerYear = 24.0 * 365.0;
inline constexpr int kWorstSofa = 24;

inline constexpr std::string_view kIvFluid = "iv_fluid_rate";
inline constexpr std::string_view kVasopressor = "vasopressor_rate";
inline constexpr std::string_view kOutcomeHours = "hours_survived";
inline constexpr std::string_view kOutcomeSurvived = "survived_1yr";
inline constexpr std::string_view kOutcomeSofa = "final_sofa";

enum class EventKind { measurement, treatment, outcome };

std::string_view to_string(EventKind kind) noexcept;
EventKind event_kind_from_string(std::string_view s);

/// A treatment event sets the infusion rate of its channel from `time` until
/// the next treatment event of the same name.
struct Event {
  double time = 0.0;
  EventKind kind = EventKind::measurement;
  std::string name;
  double value = 0.0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct StaticFeatures {
  double age = 0.0;
  double weight = 0.0;
  double elixhauser = 0.0;

  friend bool operator==(const StaticFeatures&, const StaticFeatures&) = default;
};

struct Outcome {
  double hours_survived = 0.0;  // H, from admission
  int survived_1yr = 0;         // S = 1 iff H >= 8760
  int final_sofa = 0;           // Y in 0..24

  void validate() const;
  friend bool operator==(const Outcome&, const Outcome&) = default;
};

/// One patient's record. Measurement and treatment events live in `events`
/// (time-ordered); the outcome is held once in `outcome` and serialised as
/// the three fixed outcome-kind records.
struct EventLog {
  std::string patient_id;
  StaticFeatures statics;
  std::vector<Event> events;
  Outcome outcome;

  /// End of the observed ICU window: 72 h, or time of death if earlier.
  double icu_end() const noexcept;
  friend bool operator==(const EventLog&, const EventLog&) = default;
};

/// Measurement channel: emitted with Poisson(rate * rate_scale) times plus one
/// admission measurement at t = 0.
struct ChannelSpec {
  std::string name;
  double rate_per_hour = 0.5;
};

/// The ten channels emitted by default. map, lactate and sofa are mandatory.
std::vector<ChannelSpec> default_channels();

struct SimParams {
  std::size_t n_patients = 500;
  std::uint64_t seed = 1;
  std::vector<ChannelSpec> channels = default_channels();
  double measurement_rate_scale = 1.0;
  double dt = 0.25;  // latent integration step (hours)

  double vaso_bp_gain = 20.0;         // MAP per unit vasopressor rate
  double fluid_bp_gain = 0.012;       // MAP per mL/h of fluid
  double vaso_toxicity_gain = 0.02;   // log-hazard per unit of cumulative vasopressor
  double fluid_overload_sofa_gain = 1.5;  // SOFA points per litre above 4 L
  double baseline_hazard = 0.0015;    // ICU death hazard per hour at severity 0
  double post_icu_hazard = 4e-5;      // post-discharge death hazard per hour at severity 0

  double physician_noise = 0.8;
  double physician_review_rate = 0.2;     // reviews per hour when stable
  double physician_hypotension_rate = 1.0;  // extra reviews per hour when MAP < 65

  double max_vaso_rate = 1.5;
  double max_fluid_rate = 1000.0;

  void validate() const;
};

struct Rates {
  double iv = 0.0;
  double vaso = 0.0;

  friend bool operator==(const Rates&, const Rates&) = default;
};

/// Per-patient decision process. The simulator asks for the next candidate
/// decision time, advances the patient there, then calls decide() with the
/// log so far. decide() returns the new rates, or nullopt to leave them.
class ControllerSession {
 public:
  virtual ~ControllerSession() = default;
  /// First candidate time strictly after `t` (`t` = -1 before admission).
  virtual double next_candidate(double t) = 0;
  virtual std::optional<Rates> decide(double t, const EventLog& so_far, const Rates& current) = 0;
};

class Controller {
 public:
  virtual ~Controller() = default;
  /// `header` carries patient id and statics; `seed` is the patient's policy stream.
  virtual std::unique_ptr<ControllerSession> open(const EventLog& header, std::uint64_t seed) const = 0;
};

/// The behaviour (logging) policy: reviews at a state-dependent Poisson rate
/// and sets doses from a noisy clipped affine rule.
class PhysicianController final : public Controller {
 public:
  explicit PhysicianController(const SimParams& params) : params_(params) {}
  std::unique_ptr<ControllerSession> open(const EventLog& header, std::uint64_t seed) const override;

  /// Inputs the physician looks at when reviewing.
  struct View {
    double map = 75.0;      // last measured MAP
    double lactate = 2.0;   // last measured lactate
    double cum_vaso = 0.0;  // charted cumulative vasopressor dose
    double cum_fluid = 0.0; // charted cumulative fluid (mL)
  };
  static View view_of(const EventLog& so_far, double t);

  /// Latent dose propensities before noise; dose = cap * tanh(scale * max(0, u + noise) / cap).
  static double vaso_propensity(const View& v);
  static double fluid_propensity(const View& v);
  static constexpr double kVasoScale = 0.5;
  static constexpr double kFluidScale = 250.0;

 private:
  SimParams params_;
};

/// Holds fixed rates from admission onwards.
class ConstantController final : public Controller {
 public:
  explicit ConstantController(Rates rates) : rates_(rates) {}
  std::unique_ptr<ControllerSession> open(const EventLog& header, std::uint64_t seed) const override;

 private:
  Rates rates_;
};

/// Per-patient policy acting on a fixed grid of `bin_hours`. act() is called
/// at the end of each bin with the log up to that time and returns an action
/// index 0..24.
class BinPolicy {
 public:
  virtual ~BinPolicy() = default;
  virtual int act(const EventLog& so_far, double bin_start, double bin_end) = 0;
};

/// `seed` is the patient's policy stream, for stochastic policies.
using BinPolicyFactory = std::function<std::unique_ptr<BinPolicy>(const EventLog& header, std::uint64_t seed)>;

/// Dose for each of the 5 bins of each treatment, used to turn an action
/// index back into rates.
struct ActionRates {
  std::array<double, 5> iv{};
  std::array<double, 5> vaso{};

  Rates rates_for(int action) const;
};

/// Acts every bin_hours starting at the end of the first bin (the first bin
/// is untreated). An action outside 0..24 is an error.
class GridController final : public Controller {
 public:
  GridController(double bin_hours, ActionRates rates, BinPolicyFactory factory);
  std::unique_ptr<ControllerSession> open(const EventLog& header, std::uint64_t seed) const override;

 private:
  double bin_hours_;
  ActionRates rates_;
  BinPolicyFactory factory_;
};

/// Simulates one patient. `stream` indexes the patient within the seed.
EventLog simulate_patient(const SimParams& params, std::uint64_t stream, const Controller& controller,
                          std::uint64_t master_seed);

/// Physician-treated cohort; deterministic given params.seed.
std::vector<EventLog> simulate_cohort(const SimParams& params, std::size_t threads = 0);
std::vector<EventLog> simulate_cohort(const SimParams& params, const Controller& controller, std::size_t threads = 0);

/// Number of patients simulated by this process; lets tests prove that a
/// code path never touches the simulator.
std::uint64_t simulation_calls() noexcept;

struct ValueEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t n = 0;
};

/// Per-bin rewards for a finished rollout.
using RewardFn = std::function<std::vector<double>(const EventLog&)>;

/// Monte Carlo mean of sum_t gamma^t r_t over fresh rollouts drawn from a
/// stream disjoint from simulate_cohort's.
ValueEstimate ground_truth_value(const Controller& controller, const SimParams& params, std::size_t n_rollouts,
                                 double gamma, const RewardFn& reward, std::size_t threads = 0);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void write_events_jsonl(const std::vector<EventLog>& logs, const std::filesystem::path& path);
void write_static_csv(const std::vector<EventLog>& logs, const std::filesystem::path& path);

struct IngestResult {
  std::vector<EventLog> logs;
  std::vector<std::string> warnings;
};

/// Loads events.jsonl + static.csv, validating the schema. Errors carry the
/// file and line.
IngestResult ingest_events(const std::filesystem::path& events_path, const std::filesystem::path& static_path);

}  // namespace hemorl::cohort
