#include "hemorl/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "hemorl/errors.hpp"
#include "hemorl/util.hpp"

namespace hemorl::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int category_of(int action, Treatment t) {
  return t == Treatment::iv ? discretize::iv_bin_of(action) : discretize::vaso_bin_of(action);
}

void check_action(int a) {
  if (a < 0 || a >= discretize::kNumActions) throw DataError("action " + std::to_string(a) + " out of range");
}

// Per-episode category counts of one treatment, for fast resampling.
struct CategoryCounts {
  std::vector<std::array<double, 5>> per_episode;
  std::vector<double> totals;
};

CategoryCounts category_counts(const ActionSets& sets, Treatment t) {
  CategoryCounts c;
  c.per_episode.resize(sets.size());
  c.totals.resize(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    c.per_episode[i].fill(0.0);
    for (int a : sets[i]) {
      check_action(a);
      c.per_episode[i][static_cast<std::size_t>(category_of(a, t))] += 1.0;
    }
    c.totals[i] = static_cast<double>(sets[i].size());
  }
  return c;
}

std::array<double, 5> resampled_marginal(const CategoryCounts& c, std::span<const std::size_t> idx) {
  std::array<double, 5> num{};
  double den = 0.0;
  for (std::size_t i : idx) {
    for (std::size_t k = 0; k < 5; ++k) num[k] += c.per_episode[i][k];
    den += c.totals[i];
  }
  for (double& v : num) v = den > 0 ? v / den : kNaN;
  return num;
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

void check_nonempty(const ActionSets& sets) {
  std::size_t n = 0;
  for (const auto& s : sets) n += s.size();
  if (n == 0) throw DataError("empty action set");
}

void check_paired(const ActionSets& a, const ActionSets& b) {
  if (a.size() != b.size()) throw DataError("paired comparison needs the same episodes");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw DataError("paired comparison needs equal episode lengths");
  }
}

}  // namespace

std::string_view to_string(Treatment t) noexcept { return t == Treatment::iv ? "iv" : "vaso"; }

// ---------------------------------------------------------------------------

void ActionDistribution::add(int action) {
  check_action(action);
  ++counts[static_cast<std::size_t>(discretize::iv_bin_of(action))][static_cast<std::size_t>(discretize::vaso_bin_of(action))];
  ++total;
}

double ActionDistribution::frequency(int iv_bin, int vaso_bin) const {
  if (iv_bin < 0 || iv_bin > 4 || vaso_bin < 0 || vaso_bin > 4) throw DataError("bin out of range");
  if (total == 0) return 0.0;
  return static_cast<double>(counts[iv_bin][vaso_bin]) / static_cast<double>(total);
}

std::array<double, 25> ActionDistribution::frequencies() const {
  std::array<double, 25> f{};
  for (int i = 0; i < 5; ++i) {
    for (int v = 0; v < 5; ++v) f[i * 5 + v] = frequency(i, v);
  }
  return f;
}

std::array<double, 5> ActionDistribution::marginal(Treatment t) const {
  std::array<std::uint64_t, 5> m{};
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t v = 0; v < 5; ++v) m[t == Treatment::iv ? i : v] += counts[i][v];
  }
  std::array<double, 5> f{};
  if (total == 0) return f;
  for (std::size_t k = 0; k < 5; ++k) f[k] = static_cast<double>(m[k]) / static_cast<double>(total);
  return f;
}

double ActionDistribution::nonzero_share(Treatment t) const {
  if (total == 0) return 0.0;
  std::uint64_t zero = 0;
  for (std::size_t k = 0; k < 5; ++k) zero += t == Treatment::iv ? counts[0][k] : counts[k][0];
  return static_cast<double>(total - zero) / static_cast<double>(total);
}

ActionDistribution action_distribution(const ActionSets& sets) {
  check_nonempty(sets);
  ActionDistribution d;
  for (const auto& s : sets) {
    for (int a : s) d.add(a);
  }
  return d;
}

ActionSets physician_actions(const std::vector<const discretize::Episode*>& episodes) {
  ActionSets out;
  out.reserve(episodes.size());
  for (const auto* ep : episodes) out.push_back(ep->actions);
  return out;
}

ActionSets policy_actions(const agent::QNetwork& net, const std::vector<nn::Tensor>& embeddings) {
  ActionSets out;
  out.reserve(embeddings.size());
  for (const auto& e : embeddings) {
    const nn::Tensor q = net.infer(e);
    std::vector<int> acts(q.rows());
    for (std::size_t r = 0; r < q.rows(); ++r) acts[r] = static_cast<int>(agent::argmax(q.row_span(r)));
    out.push_back(std::move(acts));
  }
  return out;
}

nlohmann::json to_json(const ActionDistribution& d) {
  nlohmann::json j;
  j["total"] = d.total;
  j["counts"] = d.counts;
  j["frequencies"] = d.frequencies();
  j["iv_marginal"] = d.marginal(Treatment::iv);
  j["vaso_marginal"] = d.marginal(Treatment::vaso);
  return j;
}

// ---------------------------------------------------------------------------

void BootstrapConfig::validate() const {
  if (n_boot < 2) throw ConfigError("n_boot must be >= 2");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must be in (0, 1)");
}

nlohmann::json to_json(const CI& ci) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"point", num(ci.point)}, {"lo", num(ci.lo)},           {"hi", num(ci.hi)},
          {"level", ci.level},      {"n_boot", ci.n_boot},        {"boot_mean", num(ci.boot_mean)},
          {"bracketed", ci.bracketed}, {"method", "percentile"}};
}

std::vector<std::vector<double>> bootstrap_replicates(std::size_t n_clusters, const MultiStatistic& stat,
                                                      const BootstrapConfig& cfg) {
  cfg.validate();
  if (n_clusters < 2) throw DataError("bootstrap needs at least 2 clusters");
  std::vector<std::vector<double>> reps(cfg.n_boot);
  const std::uint64_t salt = label_salt("bootstrap");
  parallel_for(
      cfg.n_boot,
      [&](std::size_t b) {
        std::mt19937_64 rng(derive_seed(cfg.seed, b, salt));
        std::uniform_int_distribution<std::size_t> pick(0, n_clusters - 1);
        std::vector<std::size_t> idx(n_clusters);
        for (auto& i : idx) i = pick(rng);
        reps[b] = stat(idx);
      },
      cfg.threads);
  return reps;
}

CI percentile_ci(const std::vector<std::vector<double>>& replicates, std::size_t k, double point, double level) {
  CI ci;
  ci.point = point;
  ci.level = level;
  ci.n_boot = replicates.size();
  std::vector<double> col;
  col.reserve(replicates.size());
  for (const auto& r : replicates) {
    if (k >= r.size()) throw DimensionError("replicate column out of range");
    if (std::isfinite(r[k])) col.push_back(r[k]);
  }
  if (col.empty()) return ci;
  ci.boot_mean = compensated_sum(col) / static_cast<double>(col.size());
  const double tail = 50.0 * (1.0 - level);
  ci.lo = discretize::percentile_linear(col, tail);
  ci.hi = discretize::percentile_linear(col, 100.0 - tail);
  ci.bracketed = !std::isfinite(point) || (ci.lo <= point && point <= ci.hi);
  return ci;
}

std::vector<CI> bootstrap_cis(std::size_t n_clusters, const MultiStatistic& stat, const BootstrapConfig& cfg) {
  const auto reps = bootstrap_replicates(n_clusters, stat, cfg);
  const auto idx = identity(n_clusters);
  const auto point = stat(idx);
  std::vector<CI> out;
  for (std::size_t k = 0; k < point.size(); ++k) out.push_back(percentile_ci(reps, k, point[k], cfg.level));
  return out;
}

CI bootstrap_ci(std::size_t n_clusters, const Statistic& stat, const BootstrapConfig& cfg) {
  return bootstrap_cis(
      n_clusters, [&](std::span<const std::size_t> idx) { return std::vector<double>{stat(idx)}; }, cfg)[0];
}

namespace {

template <std::size_t N>
std::array<CI, N> to_array(const std::vector<CI>& v) {
  std::array<CI, N> a;
  for (std::size_t k = 0; k < N; ++k) a[k] = v[k];
  return a;
}

}  // namespace

std::array<CI, 5> marginal_cis(const ActionSets& sets, Treatment t, const BootstrapConfig& cfg) {
  check_nonempty(sets);
  const auto c = category_counts(sets, t);
  return to_array<5>(bootstrap_cis(
      sets.size(),
      [&](std::span<const std::size_t> idx) {
        const auto m = resampled_marginal(c, idx);
        return std::vector<double>(m.begin(), m.end());
      },
      cfg));
}

// ---------------------------------------------------------------------------

double risk_ratio(double freq_new, double freq_base) { return freq_base > 0.0 ? freq_new / freq_base : kNaN; }

RiskRatio relative_risk(const ActionSets& sets_new, const ActionSets& sets_base, Treatment t, int category,
                        const BootstrapConfig& cfg) {
  if (category < 0 || category > 4) throw DataError("category out of range");
  check_nonempty(sets_base);
  check_paired(sets_new, sets_base);
  const auto cn = category_counts(sets_new, t);
  const auto cb = category_counts(sets_base, t);
  const auto k = static_cast<std::size_t>(category);
  RiskRatio out;
  const auto all = identity(sets_new.size());
  out.freq_new = resampled_marginal(cn, all)[k];
  out.freq_base = resampled_marginal(cb, all)[k];
  out.defined = out.freq_base > 0.0;
  if (!out.defined) {
    out.rr.n_boot = 0;
    out.rr.level = cfg.level;
    return out;
  }
  out.rr = bootstrap_ci(
      sets_new.size(),
      [&](std::span<const std::size_t> idx) {
        return risk_ratio(resampled_marginal(cn, idx)[k], resampled_marginal(cb, idx)[k]);
      },
      cfg);
  return out;
}

std::array<CI, 5> paired_difference_cis(const ActionSets& sets_new, const ActionSets& sets_base, Treatment t,
                                        const BootstrapConfig& cfg) {
  check_nonempty(sets_base);
  check_paired(sets_new, sets_base);
  const auto cn = category_counts(sets_new, t);
  const auto cb = category_counts(sets_base, t);
  return to_array<5>(bootstrap_cis(
      sets_new.size(),
      [&](std::span<const std::size_t> idx) {
        const auto a = resampled_marginal(cn, idx);
        const auto b = resampled_marginal(cb, idx);
        std::vector<double> d(5);
        for (std::size_t k = 0; k < 5; ++k) d[k] = a[k] - b[k];
        return d;
      },
      cfg));
}

std::array<double, 5> distribution_diff(const ActionDistribution& a, const ActionDistribution& b, Treatment t) {
  const auto ma = a.marginal(t), mb = b.marginal(t);
  std::array<double, 5> d{};
  for (std::size_t k = 0; k < 5; ++k) d[k] = 100.0 * (ma[k] - mb[k]);
  return d;
}

// ---------------------------------------------------------------------------

InitiationRate initiation_rate(const ActionSets& sets, Treatment t, const BootstrapConfig& cfg,
                               InitiationVariant variant) {
  // Per-episode (events, at risk).
  std::vector<double> ev(sets.size()), risk(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (variant == InitiationVariant::per_episode) {
      risk[i] = sets[i].empty() ? 0.0 : 1.0;
      for (int a : sets[i]) {
        check_action(a);
        if (category_of(a, t) != 0) {
          ev[i] = 1.0;
          break;
        }
      }
      continue;
    }
    bool prev_zero = true;
    for (int a : sets[i]) {
      check_action(a);
      const bool treated = category_of(a, t) != 0;
      if (prev_zero) {
        risk[i] += 1.0;
        if (treated) ev[i] += 1.0;
      }
      prev_zero = !treated;
    }
  }
  InitiationRate out;
  out.events = static_cast<std::size_t>(compensated_sum(ev));
  out.at_risk = static_cast<std::size_t>(compensated_sum(risk));
  out.defined = out.at_risk > 0;
  out.rate.level = cfg.level;
  if (!out.defined) return out;
  auto stat = [&](std::span<const std::size_t> idx) {
    double e = 0.0, r = 0.0;
    for (std::size_t i : idx) e += ev[i], r += risk[i];
    return r > 0 ? e / r : kNaN;
  };
  if (sets.size() < 2) {
    out.rate.point = stat(identity(sets.size()));
    return out;
  }
  out.rate = bootstrap_ci(sets.size(), stat, cfg);
  return out;
}

// ---------------------------------------------------------------------------

std::array<CvCell, 25> restart_cv(const std::vector<ActionDistribution>& restarts) {
  if (restarts.size() < 2) throw DataError("restart_cv needs at least 2 restarts");
  std::vector<std::array<double, 25>> f;
  for (const auto& d : restarts) f.push_back(d.frequencies());
  const double n = static_cast<double>(restarts.size());
  std::array<CvCell, 25> out;
  for (std::size_t c = 0; c < 25; ++c) {
    CompensatedSum s;
    for (const auto& row : f) s.add(row[c]);
    const bool constant = std::all_of(f.begin(), f.end(), [&](const auto& row) { return row[c] == f[0][c]; });
    // The rounded mean of equal values can miss them by an ulp.
    const double mean = constant ? f[0][c] : s.value() / n;
    CompensatedSum ss;
    for (const auto& row : f) ss.add((row[c] - mean) * (row[c] - mean));
    out[c].mean = mean;
    out[c].sd = std::sqrt(ss.value() / (n - 1.0));
    out[c].defined = mean > 0.0;
    out[c].cv = out[c].defined ? out[c].sd / mean : kNaN;
  }
  return out;
}

double max_cv(const std::array<CvCell, 25>& cells) {
  double m = kNaN;
  for (const auto& c : cells) {
    if (c.defined && !(c.cv <= m)) m = c.cv;
  }
  return m;
}

// ---------------------------------------------------------------------------

std::vector<SofaBucket> default_sofa_buckets() {
  return {{"SOFA<5", 5.0, false}, {"SOFA 5-15", 15.0, true}, {"SOFA>15", std::numeric_limits<double>::infinity(), true}};
}

std::vector<Subgroup> subgroup_distributions(const ActionSets& sets, const std::vector<std::vector<double>>& sofa,
                                             const std::vector<SofaBucket>& buckets) {
  if (buckets.empty()) throw ConfigError("no SOFA buckets");
  check_nonempty(sets);
  if (sofa.size() != sets.size()) throw DimensionError("SOFA and action sets differ in episode count");
  std::vector<Subgroup> out;
  for (const auto& b : buckets) out.push_back({b, {}, true});
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sofa[i].size() != sets[i].size()) throw DimensionError("SOFA and actions differ in length");
    for (std::size_t t = 0; t < sets[i].size(); ++t) {
      const double s = sofa[i][t];
      if (std::isnan(s)) throw DataError("missing SOFA in episode " + std::to_string(i) + " bin " + std::to_string(t));
      auto it = std::find_if(out.begin(), out.end(), [&](const Subgroup& g) {
        return s < g.bucket.hi || (g.bucket.hi_inclusive && s == g.bucket.hi);
      });
      if (it == out.end()) throw DataError("SOFA value above every bucket");
      it->dist.add(sets[i][t]);
      it->empty = false;
    }
  }
  return out;
}

std::vector<std::vector<double>> episode_sofa(const std::vector<const discretize::Episode*>& episodes) {
  std::vector<std::vector<double>> out;
  out.reserve(episodes.size());
  for (const auto* ep : episodes) out.push_back(ep->sofa);
  return out;
}

double nonzero_ratio(const ActionDistribution& policy, const ActionDistribution& base, Treatment t) {
  return risk_ratio(policy.nonzero_share(t), base.nonzero_share(t));
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

std::string heatmap_csv(const ActionDistribution& d) {
  std::string out = "iv_bin,vaso_bin,count,frequency\n";
  for (int i = 0; i < 5; ++i) {
    for (int v = 0; v < 5; ++v) {
      out += std::to_string(i) + "," + std::to_string(v) + "," + std::to_string(d.counts[i][v]) + "," +
             fmt(d.frequency(i, v)) + "\n";
    }
  }
  return out;
}

std::string table_csv(const std::array<CI, 5>& rows) {
  std::string out = "category,point,lo,hi\n";
  for (std::size_t k = 0; k < 5; ++k) {
    out += csv_escape(kCategoryLabels[k]) + "," + fmt(rows[k].point) + "," + fmt(rows[k].lo) + "," + fmt(rows[k].hi) +
           "\n";
  }
  return out;
}

}  // namespace hemorl::metrics
