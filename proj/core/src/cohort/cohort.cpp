#include "hemorl/cohort/cohort.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "hemorl/errors.hpp"
#include "hemorl/util.hpp"

namespace hemorl::cohort {

namespace {

std::atomic<std::uint64_t> g_simulation_calls{0};

constexpr double kInf = std::numeric_limits<double>::infinity();

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

std::string_view to_string(EventKind kind) noexcept {
  switch (kind) {
    case EventKind::measurement: return "measurement";
    case EventKind::treatment: return "treatment";
    case EventKind::outcome: return "outcome";
  }
  return "unknown";
}

EventKind event_kind_from_string(std::string_view s) {
  if (s == "measurement") return EventKind::measurement;
  if (s == "treatment") return EventKind::treatment;
  if (s == "outcome") return EventKind::outcome;
  throw DataError("unknown event kind '" + std::string(s) + "'");
}

void Outcome::validate() const {
  if (!std::isfinite(hours_survived) || hours_survived < 0.0) {
    throw DataError("hours_survived must be finite and non-negative");
  }
  if (survived_1yr != (hours_survived >= kHoursPerYear ? 1 : 0)) {
    throw DataError("survived_1yr must equal (hours_survived >= 8760)");
  }
  if (final_sofa < 0 || final_sofa > kWorstSofa) throw DataError("final_sofa must lie in 0..24");
}

double EventLog::icu_end() const noexcept { return std::min(outcome.hours_survived, kIcuHours); }

std::vector<ChannelSpec> default_channels() {
  return {{"map", 1.0},        {"heart_rate", 1.0}, {"resp_rate", 0.6},  {"temperature", 0.3},
          {"spo2", 1.0},       {"lactate", 0.25},   {"sofa", 0.15},      {"creatinine", 0.15},
          {"wbc", 0.12},       {"urine_output", 0.5}};
}

namespace {

const std::set<std::string>& known_channels() {
  static const std::set<std::string> names = [] {
    std::set<std::string> s;
    for (const auto& c : default_channels()) s.insert(c.name);
    return s;
  }();
  return names;
}

}  // namespace

void SimParams::validate() const {
  if (n_patients < 1) throw ConfigError("n_patients must be >= 1");
  if (!(dt > 0.0 && dt <= 1.0)) throw ConfigError("dt must lie in (0, 1]");
  const double nonneg[] = {measurement_rate_scale, vaso_bp_gain,     fluid_bp_gain,
                           vaso_toxicity_gain,     fluid_overload_sofa_gain, baseline_hazard,
                           post_icu_hazard,        physician_noise,  physician_review_rate,
                           physician_hypotension_rate, max_vaso_rate, max_fluid_rate};
  for (double v : nonneg) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("simulator rates and gains must be finite and >= 0");
  }
  if (physician_review_rate + physician_hypotension_rate <= 0.0) {
    throw ConfigError("physician review rate must be positive");
  }
  std::set<std::string> seen;
  for (const auto& c : channels) {
    if (!known_channels().count(c.name)) throw ConfigError("unknown channel '" + c.name + "'");
    if (!seen.insert(c.name).second) throw ConfigError("duplicate channel '" + c.name + "'");
    if (!(c.rate_per_hour >= 0.0)) throw ConfigError("channel rate must be >= 0");
  }
  for (const char* core : {"map", "lactate", "sofa"}) {
    if (!seen.count(core)) throw ConfigError(std::string("channel '") + core + "' is required");
  }
}

// ---------------------------------------------------------------------------
// Latent physiology
// ---------------------------------------------------------------------------

namespace {

struct Latent {
  double severity = 0.3;
  double map = 75.0;
  double lactate = 2.0;
  double cum_vaso = 0.0;
  double cum_fluid = 0.0;  // mL
};

double hypotension(double map) { return std::max(0.0, 65.0 - map) / 10.0; }

int sofa_proxy(const Latent& x, const SimParams& p) {
  const double overload = std::max(0.0, x.cum_fluid - 4000.0) / 1000.0;
  const double raw = 24.0 * (0.7 * x.severity + 0.04 * (x.lactate - 1.0)) + p.fluid_overload_sofa_gain * overload +
                     2.0 * hypotension(x.map);
  return static_cast<int>(std::lround(std::clamp(raw, 0.0, static_cast<double>(kWorstSofa))));
}

void advance(Latent& x, const Rates& r, double h, const SimParams& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  x.cum_vaso += r.vaso * h;
  x.cum_fluid += r.iv * h;
  const double target = 84.0 - 42.0 * x.severity + p.vaso_bp_gain * r.vaso + p.fluid_bp_gain * std::min(r.iv, 600.0);
  x.map += (target - x.map) * (1.0 - std::exp(-h / 0.75)) + 2.5 * std::sqrt(h) * n01(rng);
  const double hypo = hypotension(x.map);
  const double ds = (-0.01 + 0.08 * hypo + 0.1 * p.vaso_toxicity_gain * r.vaso) * h + 0.02 * std::sqrt(h) * n01(rng);
  x.severity = clamp01(x.severity + ds);
  const double lac_target = 1.0 + 4.0 * x.severity + 1.5 * hypo;
  x.lactate = std::max(0.3, x.lactate + (lac_target - x.lactate) * (1.0 - std::exp(-h / 2.0)) +
                                0.15 * std::sqrt(h) * n01(rng));
}

double icu_hazard(const Latent& x, const SimParams& p) {
  return p.baseline_hazard *
         std::exp(3.0 * x.severity + 1.0 * hypotension(x.map) + p.vaso_toxicity_gain * x.cum_vaso);
}

double post_icu_hazard(const Latent& x, const SimParams& p) {
  return p.post_icu_hazard * std::exp(3.0 * x.severity + 0.5 * p.vaso_toxicity_gain * x.cum_vaso);
}

double measure(std::string_view ch, const Latent& x, const Rates& r, const SimParams& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  const double s = x.severity;
  const double low_map = std::max(0.0, 65.0 - x.map);
  if (ch == "map") return x.map + 3.0 * n01(rng);
  if (ch == "heart_rate") return 75.0 + 35.0 * s + 0.8 * low_map + 8.0 * r.vaso + 6.0 * n01(rng);
  if (ch == "resp_rate") return 14.0 + 10.0 * s + 2.5 * n01(rng);
  if (ch == "temperature") return 36.9 + 1.4 * s + 0.35 * n01(rng);
  if (ch == "spo2") return std::min(100.0, 98.5 - 7.0 * s + 1.2 * n01(rng));
  if (ch == "lactate") return std::max(0.3, x.lactate + 0.25 * n01(rng));
  if (ch == "sofa") return static_cast<double>(sofa_proxy(x, p));
  if (ch == "creatinine") {
    return std::max(0.3, 0.8 + 2.2 * s + 0.15 * std::max(0.0, x.cum_fluid - 4000.0) / 1000.0 + 0.15 * n01(rng));
  }
  if (ch == "wbc") return std::max(0.5, 8.0 + 9.0 * s + 2.0 * n01(rng));
  if (ch == "urine_output") return std::max(0.0, 70.0 - 45.0 * s - 1.2 * low_map + 0.03 * r.iv + 12.0 * n01(rng));
  throw ConfigError("unknown channel '" + std::string(ch) + "'");
}

double beta_draw(double a, double b, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

std::string patient_name(std::uint64_t stream) {
  std::string digits = std::to_string(stream);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "p" + digits;
}

}  // namespace

// ---------------------------------------------------------------------------
// Controllers
// ---------------------------------------------------------------------------

PhysicianController::View PhysicianController::view_of(const EventLog& so_far, double t) {
  View v;
  double iv_rate = 0.0;
  double vaso_rate = 0.0;
  double last = 0.0;
  for (const auto& e : so_far.events) {
    if (e.time > t) break;
    if (e.kind == EventKind::measurement) {
      if (e.name == "map") v.map = e.value;
      if (e.name == "lactate") v.lactate = e.value;
    } else if (e.kind == EventKind::treatment) {
      v.cum_fluid += iv_rate * (e.time - last);
      v.cum_vaso += vaso_rate * (e.time - last);
      last = e.time;
      if (e.name == kIvFluid) iv_rate = e.value;
      if (e.name == kVasopressor) vaso_rate = e.value;
    }
  }
  v.cum_fluid += iv_rate * (t - last);
  v.cum_vaso += vaso_rate * (t - last);
  return v;
}

double PhysicianController::vaso_propensity(const View& v) {
  return (70.0 - v.map) / 4.0 + 0.25 * (v.lactate - 2.0);
}

double PhysicianController::fluid_propensity(const View& v) {
  return -0.6 + (70.0 - v.map) / 12.0 + 0.3 * (v.lactate - 2.0) - v.cum_fluid / 4000.0;
}

namespace {

class PhysicianSession final : public ControllerSession {
 public:
  PhysicianSession(const SimParams& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  double next_candidate(double t) override {
    const double lambda_max = p_.physician_review_rate + p_.physician_hypotension_rate;
    std::exponential_distribution<double> gap(lambda_max);
    return std::max(t, 0.0) + gap(rng_);
  }

  std::optional<Rates> decide(double t, const EventLog& so_far, const Rates& /*current*/) override {
    const auto view = PhysicianController::view_of(so_far, t);
    const double lambda_max = p_.physician_review_rate + p_.physician_hypotension_rate;
    const double lambda = p_.physician_review_rate + (view.map < 65.0 ? p_.physician_hypotension_rate : 0.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, p_.physician_noise);
    // Always consume the same draws so the stream stays aligned.
    const double accept = u(rng_);
    const double nv = noise(rng_);
    const double nf = noise(rng_);
    if (accept * lambda_max >= lambda) return std::nullopt;
    Rates r;
    // Soft cap: tanh saturation keeps the dose distribution free of a point mass at the maximum.
    auto capped = [](double dose, double cap) { return cap > 0.0 ? cap * std::tanh(dose / cap) : 0.0; };
    r.vaso = capped(PhysicianController::kVasoScale * std::max(0.0, PhysicianController::vaso_propensity(view) + nv),
                    p_.max_vaso_rate);
    r.iv = capped(PhysicianController::kFluidScale * std::max(0.0, PhysicianController::fluid_propensity(view) + nf),
                  p_.max_fluid_rate);
    return r;
  }

 private:
  SimParams p_;
  std::mt19937_64 rng_;
};

class ConstantSession final : public ControllerSession {
 public:
  explicit ConstantSession(Rates r) : rates_(r) {}
  double next_candidate(double t) override { return t < 0.0 ? 0.0 : kInf; }
  std::optional<Rates> decide(double, const EventLog&, const Rates&) override { return rates_; }

 private:
  Rates rates_;
};

class GridSession final : public ControllerSession {
 public:
  GridSession(double bin_hours, const ActionRates& rates, std::unique_ptr<BinPolicy> policy)
      : bin_hours_(bin_hours), rates_(rates), policy_(std::move(policy)) {}

  double next_candidate(double /*t*/) override { return bin_hours_ * static_cast<double>(++k_); }

  std::optional<Rates> decide(double t, const EventLog& so_far, const Rates&) override {
    const int a = policy_->act(so_far, t - bin_hours_, t);
    if (a < 0 || a > 24) {
      throw DataError("policy emitted invalid action index " + std::to_string(a) + " at t=" + format_double(t));
    }
    return rates_.rates_for(a);
  }

 private:
  double bin_hours_;
  ActionRates rates_;
  std::unique_ptr<BinPolicy> policy_;
  std::uint64_t k_ = 0;
};

}  // namespace

std::unique_ptr<ControllerSession> PhysicianController::open(const EventLog&, std::uint64_t seed) const {
  return std::make_unique<PhysicianSession>(params_, seed);
}

std::unique_ptr<ControllerSession> ConstantController::open(const EventLog&, std::uint64_t) const {
  return std::make_unique<ConstantSession>(rates_);
}

Rates ActionRates::rates_for(int action) const {
  if (action < 0 || action > 24) throw DataError("action index " + std::to_string(action) + " outside 0..24");
  return {iv[static_cast<std::size_t>(action / 5)], vaso[static_cast<std::size_t>(action % 5)]};
}

GridController::GridController(double bin_hours, ActionRates rates, BinPolicyFactory factory)
    : bin_hours_(bin_hours), rates_(rates), factory_(std::move(factory)) {
  if (!(bin_hours_ > 0.0)) throw ConfigError("bin_hours must be positive");
  if (!factory_) throw ConfigError("GridController needs a policy factory");
}

std::unique_ptr<ControllerSession> GridController::open(const EventLog& header, std::uint64_t seed) const {
  return std::make_unique<GridSession>(bin_hours_, rates_, factory_(header, seed));
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

EventLog simulate_patient(const SimParams& p, std::uint64_t stream, const Controller& controller,
                          std::uint64_t master_seed) {
  g_simulation_calls.fetch_add(1, std::memory_order_relaxed);
  std::mt19937_64 rng_static(derive_seed(master_seed, stream, label_salt("static")));
  std::mt19937_64 rng_dyn(derive_seed(master_seed, stream, label_salt("dynamics")));
  std::mt19937_64 rng_meas(derive_seed(master_seed, stream, label_salt("measurement")));

  EventLog log;
  log.patient_id = patient_name(stream);
  std::normal_distribution<double> n01(0.0, 1.0);
  log.statics.age = std::clamp(64.0 + 14.0 * n01(rng_static), 18.0, 95.0);
  log.statics.weight = std::clamp(80.0 + 18.0 * n01(rng_static), 40.0, 180.0);
  log.statics.elixhauser = static_cast<double>(std::min(20, std::poisson_distribution<int>(4.0)(rng_static)));

  Latent x;
  x.severity = std::clamp(beta_draw(2.0, 3.0, rng_static) + 0.004 * (log.statics.age - 64.0) +
                              0.01 * (log.statics.elixhauser - 4.0),
                          0.02, 0.98);
  x.map = 84.0 - 42.0 * x.severity + 7.0 * n01(rng_static);
  x.lactate = std::max(0.4, 1.0 + 4.0 * x.severity + 0.6 * n01(rng_static));

  // Measurement schedule: admission set at t = 0, then Poisson per channel.
  struct Scheduled {
    double time;
    std::size_t channel;
  };
  std::vector<Scheduled> schedule;
  for (std::size_t c = 0; c < p.channels.size(); ++c) {
    const double rate = p.channels[c].rate_per_hour * p.measurement_rate_scale;
    if (rate <= 0.0) continue;
    std::exponential_distribution<double> gap(rate);
    for (double t = gap(rng_meas); t <= kIcuHours; t += gap(rng_meas)) schedule.push_back({t, c});
  }
  std::sort(schedule.begin(), schedule.end(), [](const Scheduled& a, const Scheduled& b) {
    return a.time < b.time || (a.time == b.time && a.channel < b.channel);
  });

  Rates rates;
  for (std::size_t c = 0; c < p.channels.size(); ++c) {
    log.events.push_back({0.0, EventKind::measurement, p.channels[c].name, measure(p.channels[c].name, x, rates, p, rng_meas)});
  }

  auto session = controller.open(log, derive_seed(master_seed, stream, label_salt("policy")));
  auto apply_decision = [&](double t) {
    auto decided = session->decide(t, log, rates);
    if (!decided) return;
    if (!(decided->iv >= 0.0) || !(decided->vaso >= 0.0)) throw DataError("controller produced a negative rate");
    if (decided->iv != rates.iv) log.events.push_back({t, EventKind::treatment, std::string(kIvFluid), decided->iv});
    if (decided->vaso != rates.vaso) {
      log.events.push_back({t, EventKind::treatment, std::string(kVasopressor), decided->vaso});
    }
    rates = *decided;
  };

  double candidate = session->next_candidate(-1.0);
  if (candidate <= 0.0) {
    apply_decision(0.0);
    candidate = session->next_candidate(0.0);
  }

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::size_t mi = 0;
  std::uint64_t grid_k = 1;
  double t = 0.0;
  bool died = false;
  while (t < kIcuHours) {
    const double grid_next = p.dt * static_cast<double>(grid_k);
    const double meas_next = mi < schedule.size() ? schedule[mi].time : kInf;
    const double t_next = std::min({grid_next, candidate, meas_next, kIcuHours});
    const double h = t_next - t;
    if (h > 0.0) {
      advance(x, rates, h, p, rng_dyn);
      const double p_death = 1.0 - std::exp(-icu_hazard(x, p) * h);
      if (u01(rng_dyn) < p_death) {
        log.outcome.hours_survived = t_next;
        died = true;
        break;
      }
    }
    t = t_next;
    while (p.dt * static_cast<double>(grid_k) <= t) ++grid_k;
    while (mi < schedule.size() && schedule[mi].time <= t) {
      const auto& ch = p.channels[schedule[mi].channel].name;
      log.events.push_back({schedule[mi].time, EventKind::measurement, ch, measure(ch, x, rates, p, rng_meas)});
      ++mi;
    }
    if (candidate <= t && t < kIcuHours) {
      apply_decision(t);
      candidate = session->next_candidate(t);
    }
  }
  if (!died) {
    std::exponential_distribution<double> post(post_icu_hazard(x, p));
    log.outcome.hours_survived = kIcuHours + post(rng_dyn);
  }
  log.outcome.survived_1yr = log.outcome.hours_survived >= kHoursPerYear ? 1 : 0;
  log.outcome.final_sofa = sofa_proxy(x, p);
  return log;
}

std::vector<EventLog> simulate_cohort(const SimParams& params, std::size_t threads) {
  return simulate_cohort(params, PhysicianController(params), threads);
}

std::vector<EventLog> simulate_cohort(const SimParams& params, const Controller& controller, std::size_t threads) {
  params.validate();
  std::vector<EventLog> out(params.n_patients);
  parallel_for(
      params.n_patients, [&](std::size_t i) { out[i] = simulate_patient(params, i, controller, params.seed); },
      threads);
  return out;
}

std::uint64_t simulation_calls() noexcept { return g_simulation_calls.load(); }

ValueEstimate ground_truth_value(const Controller& controller, const SimParams& params, std::size_t n_rollouts,
                                 double gamma, const RewardFn& reward, std::size_t threads) {
  params.validate();
  if (n_rollouts < 1) throw ConfigError("n_rollouts must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  const std::uint64_t master = derive_seed(params.seed, 0, label_salt("rollout"));
  std::vector<double> returns(n_rollouts);
  parallel_for(
      n_rollouts,
      [&](std::size_t i) {
        const EventLog log = simulate_patient(params, i, controller, master);
        const auto r = reward(log);
        CompensatedSum g;
        double discount = 1.0;
        for (double rt : r) {
          g.add(discount * rt);
          discount *= gamma;
        }
        returns[i] = g.value();
      },
      threads);
  ValueEstimate est;
  est.n = n_rollouts;
  est.mean = compensated_sum(returns) / static_cast<double>(n_rollouts);
  if (n_rollouts > 1) {
    CompensatedSum ss;
    for (double g : returns) ss.add((g - est.mean) * (g - est.mean));
    est.standard_error = std::sqrt(ss.value() / static_cast<double>(n_rollouts - 1) / static_cast<double>(n_rollouts));
  }
  return est;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void write_events_jsonl(const std::vector<EventLog>& logs, const std::filesystem::path& path) {
  std::string out;
  auto line = [&](const std::string& pid, double time, EventKind kind, std::string_view name, double value) {
    nlohmann::ordered_json j;
    j["patient_id"] = pid;
    j["time"] = time;
    j["kind"] = to_string(kind);
    j["name"] = name;
    j["value"] = value;
    out += j.dump();
    out.push_back('\n');
  };
  for (const auto& log : logs) {
    for (const auto& e : log.events) line(log.patient_id, e.time, e.kind, e.name, e.value);
    const double end = log.icu_end();
    line(log.patient_id, end, EventKind::outcome, kOutcomeHours, log.outcome.hours_survived);
    line(log.patient_id, end, EventKind::outcome, kOutcomeSurvived, log.outcome.survived_1yr);
    line(log.patient_id, end, EventKind::outcome, kOutcomeSofa, log.outcome.final_sofa);
  }
  write_file_atomic(path, out);
}

void write_static_csv(const std::vector<EventLog>& logs, const std::filesystem::path& path) {
  std::string out = "patient_id,age,weight,elixhauser\n";
  for (const auto& log : logs) {
    out += csv_escape(log.patient_id) + "," + format_double(log.statics.age) + "," +
           format_double(log.statics.weight) + "," + format_double(log.statics.elixhauser) + "\n";
  }
  write_file_atomic(path, out);
}

namespace {

[[noreturn]] void fail_at(const std::filesystem::path& file, std::size_t line, const std::string& msg) {
  throw DataError(file.filename().string() + ":" + std::to_string(line) + ": " + msg);
}

double parse_number(const std::string& s, const std::filesystem::path& file, std::size_t line, const char* what) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || !std::isfinite(v)) fail_at(file, line, std::string("invalid ") + what + " '" + s + "'");
  return v;
}

}  // namespace

IngestResult ingest_events(const std::filesystem::path& events_path, const std::filesystem::path& static_path) {
  IngestResult result;

  // static.csv
  std::vector<std::string> order;
  std::unordered_map<std::string, EventLog> by_id;
  {
    std::ifstream in(static_path);
    if (!in) throw DataError("cannot open " + static_path.string());
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> col;
    std::size_t width = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto fields = csv_split(line);
      if (col.empty()) {
        for (std::size_t i = 0; i < fields.size(); ++i) col[fields[i]] = i;
        width = fields.size();
        for (const char* req : {"patient_id", "age", "weight", "elixhauser"}) {
          if (!col.count(req)) fail_at(static_path, lineno, std::string("missing column '") + req + "'");
        }
        if (width > 4) result.warnings.push_back("static.csv: extra columns ignored");
        continue;
      }
      if (fields.size() != width) {
        fail_at(static_path, lineno, "expected " + std::to_string(width) + " fields, got " + std::to_string(fields.size()));
      }
      EventLog log;
      log.patient_id = fields[col["patient_id"]];
      if (log.patient_id.empty()) fail_at(static_path, lineno, "empty patient_id");
      log.statics.age = parse_number(fields[col["age"]], static_path, lineno, "age");
      log.statics.weight = parse_number(fields[col["weight"]], static_path, lineno, "weight");
      log.statics.elixhauser = parse_number(fields[col["elixhauser"]], static_path, lineno, "elixhauser");
      log.outcome.hours_survived = -1.0;  // marks "not yet seen"
      if (by_id.count(log.patient_id)) fail_at(static_path, lineno, "duplicate patient '" + log.patient_id + "'");
      order.push_back(log.patient_id);
      by_id.emplace(log.patient_id, std::move(log));
    }
    if (col.empty()) throw DataError(static_path.filename().string() + ": missing header");
  }

  // events.jsonl
  struct OutcomeSeen {
    bool hours = false, survived = false, sofa = false;
    double survived_value = 0.0, sofa_value = 0.0;
  };
  std::unordered_map<std::string, OutcomeSeen> outcomes;
  std::set<std::tuple<std::string, double, std::string>> seen;
  std::set<std::string> unsorted;
  {
    std::ifstream in(events_path);
    if (!in) throw DataError("cannot open " + events_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        fail_at(events_path, lineno, std::string("malformed JSON: ") + e.what());
      }
      if (!j.is_object()) fail_at(events_path, lineno, "record is not an object");
      for (const char* k : {"patient_id", "time", "kind", "name", "value"}) {
        if (!j.contains(k)) fail_at(events_path, lineno, std::string("missing field '") + k + "'");
      }
      if (!j["patient_id"].is_string() || !j["kind"].is_string() || !j["name"].is_string()) {
        fail_at(events_path, lineno, "patient_id, kind and name must be strings");
      }
      if (!j["time"].is_number() || !j["value"].is_number()) fail_at(events_path, lineno, "time and value must be numbers");
      const std::string pid = j["patient_id"];
      Event e;
      e.time = j["time"].get<double>();
      e.name = j["name"].get<std::string>();
      e.value = j["value"].get<double>();
      try {
        e.kind = event_kind_from_string(j["kind"].get<std::string>());
      } catch (const DataError& err) {
        fail_at(events_path, lineno, err.what());
      }
      if (!std::isfinite(e.time) || !std::isfinite(e.value)) fail_at(events_path, lineno, "non-finite time or value");
      auto it = by_id.find(pid);
      if (it == by_id.end()) fail_at(events_path, lineno, "patient '" + pid + "' not in static.csv");
      if (e.name.empty()) fail_at(events_path, lineno, "empty name");
      if (e.kind != EventKind::outcome && (e.time < 0.0 || e.time > kIcuHours)) {
        fail_at(events_path, lineno, "time " + format_double(e.time) + " outside [0, 72]");
      }
      if (!seen.emplace(pid, e.time, e.name).second) {
        fail_at(events_path, lineno, "duplicate record for (" + pid + ", " + format_double(e.time) + ", " + e.name + ")");
      }
      if (e.kind == EventKind::treatment) {
        if (e.name != kIvFluid && e.name != kVasopressor) fail_at(events_path, lineno, "unknown treatment '" + e.name + "'");
        if (e.value < 0.0) fail_at(events_path, lineno, "negative treatment rate");
      }
      if (e.kind == EventKind::outcome) {
        auto& o = outcomes[pid];
        if (e.name == kOutcomeHours) {
          if (e.value < 0.0) fail_at(events_path, lineno, "negative hours_survived");
          it->second.outcome.hours_survived = e.value;
          o.hours = true;
        } else if (e.name == kOutcomeSurvived) {
          o.survived = true;
          o.survived_value = e.value;
        } else if (e.name == kOutcomeSofa) {
          o.sofa = true;
          o.sofa_value = e.value;
        } else {
          fail_at(events_path, lineno, "unknown outcome '" + e.name + "'");
        }
        continue;
      }
      auto& events = it->second.events;
      if (!events.empty() && e.time < events.back().time) unsorted.insert(pid);
      events.push_back(std::move(e));
    }
  }

  for (const auto& pid : order) {
    EventLog& log = by_id.at(pid);
    const auto o = outcomes.find(pid);
    if (o == outcomes.end() || !o->second.hours || !o->second.survived || !o->second.sofa) {
      throw DataError(events_path.filename().string() + ": patient '" + pid + "' lacks a complete outcome record");
    }
    const double y = o->second.sofa_value;
    if (y != std::floor(y)) throw DataError("patient '" + pid + "': final_sofa must be an integer");
    if (o->second.survived_value != 0.0 && o->second.survived_value != 1.0) {
      throw DataError("patient '" + pid + "': survived_1yr must be 0 or 1");
    }
    log.outcome.survived_1yr = static_cast<int>(o->second.survived_value);
    log.outcome.final_sofa = static_cast<int>(y);
    try {
      log.outcome.validate();
    } catch (const DataError& e) {
      throw DataError("patient '" + pid + "': " + e.what());
    }
    if (unsorted.count(pid)) {
      std::stable_sort(log.events.begin(), log.events.end(),
                       [](const Event& a, const Event& b) { return a.time < b.time; });
      result.warnings.push_back("patient '" + pid + "': events were not in time order and have been sorted");
    }
    for (const auto& e : log.events) {
      if (e.time > log.icu_end()) {
        throw DataError("patient '" + pid + "': event at t=" + format_double(e.time) + " after hours_survived");
      }
    }
    result.logs.push_back(std::move(log));
  }
  return result;
}

}  // namespace hemorl::cohort
