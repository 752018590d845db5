#include "hemorl/discretize/discretize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "hemorl/errors.hpp"
#include "hemorl/util.hpp"

namespace hemorl::discretize {

using cohort::Event;
using cohort::EventKind;
using cohort::EventLog;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_bin_hours(double bh) {
  if (bh != 1.0 && bh != 4.0) throw ConfigError("bin_hours must be 1 or 4");
}

/// Piecewise-constant infusion rate of one treatment, starting at 0.
class RateTrack {
 public:
  void set(double t, double rate) { points_.emplace_back(t, rate); }

  double dose(double a, double b) const {
    double total = 0.0;
    double rate = 0.0;
    double from = a;
    for (const auto& [t, r] : points_) {
      if (t > a) {
        if (t >= b) break;
        total += rate * (t - from);
        from = t;
      }
      rate = r;
    }
    return total + rate * (b - from);
  }

 private:
  std::vector<std::pair<double, double>> points_;
};

struct Tracks {
  RateTrack iv, vaso;
};

Tracks tracks_of(const EventLog& log) {
  Tracks tr;
  for (const auto& e : log.events) {
    if (e.kind != EventKind::treatment) continue;
    if (e.name == cohort::kIvFluid) {
      tr.iv.set(e.time, e.value);
    } else if (e.name == cohort::kVasopressor) {
      tr.vaso.set(e.time, e.value);
    } else {
      throw DataError("patient '" + log.patient_id + "': unknown treatment '" + e.name + "'");
    }
  }
  return tr;
}

void fill_rates(Bin& bin, const Tracks& tr) {
  const double d = bin.duration();
  if (d > 0.0) {
    bin.iv = tr.iv.dose(bin.start, bin.end) / d;
    bin.vaso = tr.vaso.dose(bin.start, bin.end) / d;
  }
}

}  // namespace

double episode_end(const EventLog& log) {
  double end = log.icu_end();
  for (const auto& e : log.events) end = std::max(end, e.time);
  return std::min(end, cohort::kIcuHours);
}

BinnedTrajectory rebin(const EventLog& log, const RebinOptions& options) {
  check_bin_hours(options.bin_hours);
  const double bh = options.bin_hours;
  for (const auto& e : log.events) {
    if (!(e.time >= 0.0 && e.time <= cohort::kIcuHours)) {
      throw DataError("patient '" + log.patient_id + "': event at t=" + std::to_string(e.time) + " outside [0, 72]");
    }
  }
  const double end_time = episode_end(log);
  if (!(end_time > 0.0)) throw DataError("patient '" + log.patient_id + "': zero-length stay");

  std::vector<double> changes;
  for (const auto& e : log.events) {
    if (e.kind == EventKind::treatment && e.time > 0.0 && e.time < end_time) changes.push_back(e.time);
  }
  std::sort(changes.begin(), changes.end());
  changes.erase(std::unique(changes.begin(), changes.end()), changes.end());

  BinnedTrajectory out;
  out.patient_id = log.patient_id;
  out.statics = log.statics;
  out.outcome = log.outcome;
  out.bin_hours = bh;

  double cur = 0.0;
  double anchor = 0.0;
  std::uint64_t k = 1;  // bins since anchor (re-anchored) or grid index (fixed)
  std::size_t ci = 0;
  while (cur < end_time) {
    double nominal;
    if (options.re_anchor) {
      nominal = anchor + bh * static_cast<double>(k);
    } else {
      while (bh * static_cast<double>(k) <= cur) ++k;
      nominal = bh * static_cast<double>(k);
    }
    double end = nominal;
    bool truncated = false;
    if (ci < changes.size() && changes[ci] < nominal) {
      end = changes[ci];
      truncated = true;
    }
    end = std::min(end, end_time);
    Bin bin;
    bin.start = cur;
    bin.end = end;
    out.bins.push_back(std::move(bin));
    if (options.re_anchor) {
      if (truncated) {
        anchor = end;
        k = 1;
      } else {
        ++k;
      }
    }
    cur = end;
    while (ci < changes.size() && changes[ci] <= cur) ++ci;
  }

  std::size_t b = 0;
  for (const auto& e : log.events) {
    if (e.kind != EventKind::measurement) continue;
    while (b + 1 < out.bins.size() && e.time > out.bins[b].end) ++b;
    out.bins[b].measurements.emplace_back(e.name, e.value);
  }
  const Tracks tr = tracks_of(log);
  for (auto& bin : out.bins) fill_rates(bin, tr);
  return out;
}

Bin make_bin(const EventLog& log, double start, double end) {
  if (!(end > start) || start < 0.0) throw DataError("make_bin needs 0 <= start < end");
  Bin bin;
  bin.start = start;
  bin.end = end;
  for (const auto& e : log.events) {
    if (e.kind != EventKind::measurement) continue;
    const bool inside = e.time <= end && (e.time > start || (start == 0.0 && e.time >= 0.0));
    if (inside) bin.measurements.emplace_back(e.name, e.value);
  }
  fill_rates(bin, tracks_of(log));
  return bin;
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

double percentile_linear(std::vector<double> xs, double q) {
  if (xs.empty()) throw DataError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
  std::sort(xs.begin(), xs.end());
  const double pos = static_cast<double>(xs.size() - 1) * q / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

int TreatmentBins::bin_of(double rate) const {
  if (!(rate >= 0.0) || !std::isfinite(rate)) throw DataError("treatment rate must be finite and >= 0");
  if (rate == 0.0) return 0;
  int bin = 1;
  for (double c : cuts) bin += (c <= rate) ? 1 : 0;
  return bin;
}

TreatmentBins fit_treatment_bins(std::span<const double> rates) {
  std::vector<double> nz;
  for (double r : rates) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw DataError("treatment rate must be finite and >= 0");
    if (r > 0.0) nz.push_back(r);
  }
  if (nz.empty()) throw DataError("all-zero treatment column: cannot fit action bins");
  TreatmentBins tb;
  tb.cuts = {percentile_linear(nz, 25.0), percentile_linear(nz, 50.0), percentile_linear(nz, 75.0)};
  std::set<double> distinct(nz.begin(), nz.end());
  tb.degenerate = distinct.size() < 4;

  std::array<std::vector<double>, 5> members;
  for (double r : nz) members[static_cast<std::size_t>(tb.bin_of(r))].push_back(r);
  tb.representative[0] = 0.0;
  for (std::size_t k = 1; k < 5; ++k) {
    if (!members[k].empty()) {
      tb.representative[k] = percentile_linear(members[k], 50.0);
    } else if (k == 1) {
      tb.representative[k] = tb.cuts[0] / 2.0;
    } else if (k == 4) {
      tb.representative[k] = tb.cuts[2];
    } else {
      tb.representative[k] = (tb.cuts[k - 2] + tb.cuts[k - 1]) / 2.0;
    }
  }
  return tb;
}

int ActionBinning::encode(double iv_rate, double vaso_rate) const {
  return iv.bin_of(iv_rate) * 5 + vaso.bin_of(vaso_rate);
}

cohort::ActionRates ActionBinning::action_rates() const {
  cohort::ActionRates r;
  r.iv = iv.representative;
  r.vaso = vaso.representative;
  return r;
}

ActionBinning fit_action_bins(std::span<const BinnedTrajectory> trajectories) {
  std::vector<double> iv, vaso;
  for (const auto& t : trajectories) {
    for (const auto& b : t.bins) {
      iv.push_back(b.iv);
      vaso.push_back(b.vaso);
    }
  }
  ActionBinning out;
  try {
    out.iv = fit_treatment_bins(iv);
  } catch (const DataError& e) {
    throw DataError(std::string("iv fluid: ") + e.what());
  }
  try {
    out.vaso = fit_treatment_bins(vaso);
  } catch (const DataError& e) {
    throw DataError(std::string("vasopressor: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

std::vector<std::string> feature_names(const std::vector<std::string>& channels, bool include_history) {
  std::vector<std::string> names;
  for (const auto& c : channels) {
    names.push_back(c + "_mean");
    names.push_back(c + "_max");
    names.push_back(c + "_min");
  }
  names.insert(names.end(), {"age", "weight", "elixhauser"});
  if (include_history) names.insert(names.end(), {"cum_iv", "cum_vaso"});
  return names;
}

std::vector<double> Standardizer::apply(std::span<const double> raw) const {
  if (raw.size() != mean.size()) throw DimensionError("standardizer expects " + std::to_string(mean.size()) + " features");
  std::vector<double> out(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) out[j] = std::isnan(raw[j]) ? 0.0 : (raw[j] - mean[j]) / scale[j];
  return out;
}

void DiscretizeConfig::validate() const {
  check_bin_hours(bin_hours);
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("train_ratio must lie in (0, 1)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  std::set<std::string> seen;
  for (const auto& c : channels) {
    if (!seen.insert(c).second) throw ConfigError("duplicate channel '" + c + "'");
  }
}

std::size_t Prep::sofa_channel() const {
  const auto it = std::find(channels.begin(), channels.end(), "sofa");
  return it == channels.end() ? std::string::npos : static_cast<std::size_t>(it - channels.begin());
}

FeatureBuilder::FeatureBuilder(const Prep& prep, const cohort::StaticFeatures& statics)
    : prep_(&prep),
      statics_(statics),
      last_mean_(prep.channels.size(), kNaN),
      last_max_(prep.channels.size(), kNaN),
      last_min_(prep.channels.size(), kNaN),
      seen_(prep.channels.size(), false),
      last_sofa_(kNaN) {
  for (std::size_t i = 0; i < prep.channels.size(); ++i) index_.emplace(prep.channels[i], i);
}

std::vector<double> FeatureBuilder::push_raw(const Bin& bin) {
  const std::size_t nc = prep_->channels.size();
  std::vector<double> sum(nc, 0.0), mx(nc, -std::numeric_limits<double>::infinity()),
      mn(nc, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> count(nc, 0);
  const std::size_t sofa = prep_->sofa_channel();
  for (const auto& [name, v] : bin.measurements) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown channel '" + name + "'");
    const std::size_t c = it->second;
    sum[c] += v;
    mx[c] = std::max(mx[c], v);
    mn[c] = std::min(mn[c], v);
    ++count[c];
    if (c == sofa) last_sofa_ = v;
  }
  std::vector<double> raw;
  raw.reserve(prep_->features.size());
  for (std::size_t c = 0; c < nc; ++c) {
    if (count[c] > 0) {
      last_mean_[c] = sum[c] / static_cast<double>(count[c]);
      last_max_[c] = mx[c];
      last_min_[c] = mn[c];
      seen_[c] = true;
    }
    raw.push_back(last_mean_[c]);
    raw.push_back(last_max_[c]);
    raw.push_back(last_min_[c]);
  }
  raw.push_back(statics_.age);
  raw.push_back(statics_.weight);
  raw.push_back(statics_.elixhauser);
  if (prep_->config.include_history) {
    raw.push_back(cum_iv_);
    raw.push_back(cum_vaso_);
  }
  cum_iv_ += bin.iv * bin.duration();
  cum_vaso_ += bin.vaso * bin.duration();
  ++bins_;
  if (raw.size() != prep_->features.size()) throw DimensionError("feature layout does not match prep");
  return raw;
}

std::vector<double> FeatureBuilder::push(const Bin& bin) { return prep_->standardizer.apply(push_raw(bin)); }

Episode featurize(const BinnedTrajectory& traj, const Prep& prep) {
  if (traj.bins.empty()) throw DataError("patient '" + traj.patient_id + "' has no bins");
  FeatureBuilder fb(prep, traj.statics);
  Episode ep;
  ep.patient_id = traj.patient_id;
  ep.outcome = traj.outcome;
  const std::size_t n = traj.bins.size();
  for (std::size_t t = 0; t < n; ++t) {
    const Bin& b = traj.bins[t];
    try {
      ep.features.push_back(fb.push(b));
    } catch (const DataError& e) {
      throw DataError("patient '" + traj.patient_id + "': " + e.what());
    }
    ep.bin_start.push_back(b.start);
    ep.bin_end.push_back(b.end);
    ep.iv_rate.push_back(b.iv);
    ep.vaso_rate.push_back(b.vaso);
    ep.sofa.push_back(fb.last_sofa());
    const Bin& next = traj.bins[std::min(t + 1, n - 1)];
    ep.actions.push_back(prep.binning.encode(next.iv, next.vaso));
  }
  return ep;
}

namespace {

std::vector<std::string> shuffled(std::vector<std::string> ids, std::uint64_t seed, std::string_view label) {
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(derive_seed(seed, 0, label_salt(label)));
  std::shuffle(ids.begin(), ids.end(), rng);
  return ids;
}

}  // namespace

std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(std::vector<std::string> ids, double ratio,
                                                                            std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  if (ids.size() < 2) throw DataError("need at least 2 patients to split");
  {
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (uniq.size() != ids.size()) throw DataError("duplicate patient ids");
  }
  const auto order = shuffled(std::move(ids), seed, "split");
  const auto n = static_cast<long>(order.size());
  const long n_train = std::clamp(std::lround(ratio * static_cast<double>(n)), 1L, n - 1);
  std::vector<std::string> train(order.begin(), order.begin() + n_train);
  std::vector<std::string> test(order.begin() + n_train, order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::vector<const Episode*> Dataset::training_side() const {
  std::vector<const Episode*> out;
  for (const auto& e : train) out.push_back(&e);
  for (const auto& e : val) out.push_back(&e);
  return out;
}

Dataset build_dataset(const std::vector<EventLog>& logs, const DiscretizeConfig& config, std::size_t threads) {
  config.validate();
  Dataset data;
  Prep& prep = data.prep;
  prep.config = config;

  std::vector<BinnedTrajectory> binned(logs.size());
  const RebinOptions opts{config.bin_hours, config.re_anchor};
  parallel_for(logs.size(), [&](std::size_t i) { binned[i] = rebin(logs[i], opts); }, threads);

  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    ids.push_back(logs[i].patient_id);
    where[logs[i].patient_id] = i;
  }
  auto [train_ids, test_ids] = split_dataset(ids, config.train_ratio, config.seed);
  auto order = shuffled(train_ids, config.seed, "validation");
  const auto n_tr = static_cast<long>(order.size());
  long n_val = std::lround(config.val_fraction * static_cast<double>(n_tr));
  n_val = std::clamp(n_val, 0L, n_tr - 1);
  prep.split.val.assign(order.begin(), order.begin() + n_val);
  prep.split.train.assign(order.begin() + n_val, order.end());
  std::sort(prep.split.val.begin(), prep.split.val.end());
  std::sort(prep.split.train.begin(), prep.split.train.end());
  prep.split.test = test_ids;

  // Fitting uses the whole training side (train + val).
  std::vector<BinnedTrajectory> fit_set;
  for (const auto& id : train_ids) fit_set.push_back(binned[where.at(id)]);

  if (config.channels.empty()) {
    std::set<std::string> names;
    for (const auto& t : fit_set) {
      for (const auto& b : t.bins) {
        for (const auto& m : b.measurements) names.insert(m.first);
      }
    }
    prep.channels.assign(names.begin(), names.end());
  } else {
    prep.channels = config.channels;
  }
  prep.features = feature_names(prep.channels, config.include_history);
  prep.binning = fit_action_bins(fit_set);
  if (prep.binning.iv.degenerate) data.warnings.push_back("iv fluid: fewer than 4 distinct nonzero rates");
  if (prep.binning.vaso.degenerate) data.warnings.push_back("vasopressor: fewer than 4 distinct nonzero rates");

  // Standardiser: mean over available values, then population sd with the
  // gaps filled by that mean.
  const std::size_t nf = prep.features.size();
  std::vector<std::vector<std::vector<double>>> raw(fit_set.size());
  parallel_for(
      fit_set.size(),
      [&](std::size_t i) {
        FeatureBuilder fb(prep, fit_set[i].statics);
        for (const auto& b : fit_set[i].bins) {
          try {
            raw[i].push_back(fb.push_raw(b));
          } catch (const DataError& e) {
            throw DataError("patient '" + fit_set[i].patient_id + "': " + e.what());
          }
        }
      },
      threads);
  const std::size_t first_history = config.include_history ? nf - 2 : nf;
  prep.standardizer.mean.assign(nf, 0.0);
  prep.standardizer.scale.assign(nf, 1.0);
  for (std::size_t j = 0; j < nf; ++j) {
    CompensatedSum s;
    std::size_t n_obs = 0, n_all = 0;
    for (const auto& ep : raw) {
      for (const auto& row : ep) {
        ++n_all;
        if (!std::isnan(row[j])) {
          s.add(row[j]);
          ++n_obs;
        }
      }
    }
    const double m = n_obs ? s.value() / static_cast<double>(n_obs) : 0.0;
    CompensatedSum ss;
    for (const auto& ep : raw) {
      for (const auto& row : ep) {
        const double d = (std::isnan(row[j]) ? m : row[j]) - m;
        ss.add(d * d);
      }
    }
    const double sd = n_all ? std::sqrt(ss.value() / static_cast<double>(n_all)) : 0.0;
    prep.standardizer.mean[j] = j >= first_history ? 0.0 : m;
    prep.standardizer.scale[j] = (sd > 0.0 && std::isfinite(sd)) ? sd : 1.0;
  }

  std::vector<Episode> episodes(binned.size());
  parallel_for(binned.size(), [&](std::size_t i) { episodes[i] = featurize(binned[i], prep); }, threads);
  auto take = [&](const std::vector<std::string>& side, std::vector<Episode>& dst) {
    for (const auto& id : side) dst.push_back(std::move(episodes[where.at(id)]));
  };
  take(prep.split.train, data.train);
  take(prep.split.val, data.val);
  take(prep.split.test, data.test);
  return data;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

nlohmann::json bins_to_json(const TreatmentBins& b) {
  return {{"cuts", b.cuts}, {"representative", b.representative}, {"degenerate", b.degenerate}};
}

TreatmentBins bins_from_json(const nlohmann::json& j) {
  TreatmentBins b;
  b.cuts = j.at("cuts").get<std::array<double, 3>>();
  b.representative = j.at("representative").get<std::array<double, 5>>();
  b.degenerate = j.at("degenerate").get<bool>();
  return b;
}

nlohmann::json nan_as_null(const std::vector<double>& xs) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : xs) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return a;
}

std::vector<double> null_as_nan(const nlohmann::json& a) {
  std::vector<double> out;
  for (const auto& x : a) out.push_back(x.is_null() ? kNaN : x.get<double>());
  return out;
}

}  // namespace

nlohmann::json prep_to_json(const Prep& prep) {
  const auto& c = prep.config;
  return {
      {"schema_version", kSchemaVersion},
      {"config",
       {{"bin_hours", c.bin_hours},
        {"re_anchor", c.re_anchor},
        {"include_history", c.include_history},
        {"train_ratio", c.train_ratio},
        {"val_fraction", c.val_fraction},
        {"seed", std::to_string(c.seed)},
        {"channels", c.channels}}},
      {"channels", prep.channels},
      {"features", prep.features},
      {"standardizer", {{"mean", prep.standardizer.mean}, {"scale", prep.standardizer.scale}}},
      {"action_binning", {{"iv", bins_to_json(prep.binning.iv)}, {"vaso", bins_to_json(prep.binning.vaso)}}},
      {"split", {{"train", prep.split.train}, {"val", prep.split.val}, {"test", prep.split.test}}},
  };
}

Prep prep_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw DataError("unsupported prep schema version");
    Prep p;
    const auto& c = j.at("config");
    p.config.bin_hours = c.at("bin_hours").get<double>();
    p.config.re_anchor = c.at("re_anchor").get<bool>();
    p.config.include_history = c.at("include_history").get<bool>();
    p.config.train_ratio = c.at("train_ratio").get<double>();
    p.config.val_fraction = c.at("val_fraction").get<double>();
    p.config.seed = std::stoull(c.at("seed").get<std::string>());
    p.config.channels = c.at("channels").get<std::vector<std::string>>();
    p.channels = j.at("channels").get<std::vector<std::string>>();
    p.features = j.at("features").get<std::vector<std::string>>();
    p.standardizer.mean = j.at("standardizer").at("mean").get<std::vector<double>>();
    p.standardizer.scale = j.at("standardizer").at("scale").get<std::vector<double>>();
    p.binning.iv = bins_from_json(j.at("action_binning").at("iv"));
    p.binning.vaso = bins_from_json(j.at("action_binning").at("vaso"));
    p.split.train = j.at("split").at("train").get<std::vector<std::string>>();
    p.split.val = j.at("split").at("val").get<std::vector<std::string>>();
    p.split.test = j.at("split").at("test").get<std::vector<std::string>>();
    if (p.features != feature_names(p.channels, p.config.include_history) ||
        p.standardizer.mean.size() != p.features.size() || p.standardizer.scale.size() != p.features.size()) {
      throw DataError("prep feature layout is inconsistent");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prep: ") + e.what());
  }
}

std::string prep_hash(const Prep& prep) { return canonical_hash(prep_to_json(prep)); }

nlohmann::json episode_to_json(const Episode& ep, std::string_view split) {
  return {
      {"schema_version", kSchemaVersion},
      {"patient_id", ep.patient_id},
      {"split", split},
      {"bin_start", ep.bin_start},
      {"bin_end", ep.bin_end},
      {"features", ep.features},
      {"actions", ep.actions},
      {"iv_rate", ep.iv_rate},
      {"vaso_rate", ep.vaso_rate},
      {"sofa", nan_as_null(ep.sofa)},
      {"outcome",
       {{"hours_survived", ep.outcome.hours_survived},
        {"survived_1yr", ep.outcome.survived_1yr},
        {"final_sofa", ep.outcome.final_sofa}}},
  };
}

Episode episode_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw DataError("unsupported episode schema version");
    Episode ep;
    ep.patient_id = j.at("patient_id").get<std::string>();
    ep.bin_start = j.at("bin_start").get<std::vector<double>>();
    ep.bin_end = j.at("bin_end").get<std::vector<double>>();
    ep.features = j.at("features").get<std::vector<std::vector<double>>>();
    ep.actions = j.at("actions").get<std::vector<int>>();
    ep.iv_rate = j.at("iv_rate").get<std::vector<double>>();
    ep.vaso_rate = j.at("vaso_rate").get<std::vector<double>>();
    ep.sofa = null_as_nan(j.at("sofa"));
    const auto& o = j.at("outcome");
    ep.outcome.hours_survived = o.at("hours_survived").get<double>();
    ep.outcome.survived_1yr = o.at("survived_1yr").get<int>();
    ep.outcome.final_sofa = o.at("final_sofa").get<int>();
    const std::size_t n = ep.actions.size();
    if (n == 0 || ep.bin_start.size() != n || ep.bin_end.size() != n || ep.features.size() != n ||
        ep.iv_rate.size() != n || ep.vaso_rate.size() != n || ep.sofa.size() != n) {
      throw DataError("episode '" + ep.patient_id + "' has ragged per-bin arrays");
    }
    for (int a : ep.actions) {
      if (a < 0 || a >= kNumActions) throw DataError("episode '" + ep.patient_id + "' has an invalid action");
    }
    return ep;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed episode: ") + e.what());
  }
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string lines;
  auto emit = [&](const std::vector<Episode>& eps, std::string_view split) {
    for (const auto& e : eps) lines += episode_to_json(e, split).dump() + "\n";
  };
  emit(data.train, "train");
  emit(data.val, "val");
  emit(data.test, "test");
  write_file_atomic(dir / "episodes.jsonl", lines);
  write_file_atomic(dir / "prep.json", prep_to_json(data.prep).dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset data;
  try {
    data.prep = prep_from_json(nlohmann::json::parse(read_file(dir / "prep.json")));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("prep.json: " + std::string(e.what()));
  }
  std::istringstream in(read_file(dir / "episodes.jsonl"));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto split = j.at("split").get<std::string>();
      auto ep = episode_from_json(j);
      if (ep.features.front().size() != data.prep.num_features()) throw DataError("feature width differs from prep");
      if (split == "train") {
        data.train.push_back(std::move(ep));
      } else if (split == "val") {
        data.val.push_back(std::move(ep));
      } else if (split == "test") {
        data.test.push_back(std::move(ep));
      } else {
        throw DataError("unknown split '" + split + "'");
      }
    } catch (const std::exception& e) {
      throw DataError("episodes.jsonl:" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

}  // namespace hemorl::discretize
