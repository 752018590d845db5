#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "hemorl/errors.hpp"
#include "hemorl/harness/harness.hpp"
#include "hemorl/util.hpp"

namespace hemorl::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

std::vector<ExperimentConfig> expand_grid(const GridSpec& grid) {
  auto rewards = grid.rewards;
  if (rewards.empty()) {
    rewards.push_back({reward::RewardKind::short_term, 10.0, cohort::kWorstSofa});
    for (double c : {1.0, 10.0, 100.0}) rewards.push_back({reward::RewardKind::long_term, c, cohort::kWorstSofa});
  }
  const std::size_t n = grid.bin_hours.size() * grid.include_history.size() * grid.embedding.size() * rewards.size();
  if (n == 0) throw ConfigError("grid has an empty axis");
  if (n > grid.max_cells) {
    throw ConfigError("grid has " + std::to_string(n) + " cells, above the limit of " + std::to_string(grid.max_cells));
  }
  std::vector<ExperimentConfig> out;
  for (double b : grid.bin_hours) {
    for (bool h : grid.include_history) {
      for (auto a : grid.embedding) {
        for (const auto& r : rewards) {
          auto c = grid.base;
          c.bin_hours = b;
          c.include_history = h;
          c.embedding = a;
          c.reward = r;
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

std::vector<json> load_records(const fs::path& out) {
  std::vector<json> recs;
  const fs::path runs = out / "runs";
  if (!fs::exists(runs)) return recs;
  for (const auto& d : fs::directory_iterator(runs)) {
    const fs::path f = d.path() / "record.json";
    if (fs::exists(f)) recs.push_back(json::parse(read_file(f)));
  }
  std::sort(recs.begin(), recs.end(), [](const json& a, const json& b) {
    return std::make_pair(a.at("label").get<std::string>(), a.at("config_hash").get<std::string>()) <
           std::make_pair(b.at("label").get<std::string>(), b.at("config_hash").get<std::string>());
  });
  return recs;
}

GridResult sensitivity_grid(const std::vector<ExperimentConfig>& cells, const fs::path& out) {
  for (const auto& c : cells) c.validate();
  fs::create_directories(out);
  GridResult res;
  json manifest = {{"schema_version", kRecordSchemaVersion}, {"version", kVersion}, {"cells", json::array()}};
  for (const auto& c : cells) {
    res.records.push_back(run_experiment(c, out));
    const auto& r = res.records.back();
    manifest["cells"].push_back({{"label", r.label},
                                 {"config_hash", r.config_hash},
                                 {"ok", r.ok},
                                 {"failed_stage", r.failed_stage},
                                 {"record", "runs/" + r.config_hash + "/record.json"}});
    // The manifest is rewritten after every cell so a crash leaves a valid file.
    write_file_atomic(out / "manifest.json", manifest.dump(2));
  }
  res.report_dir = out / "report";
  res.files = write_report(res.records, res.report_dir);
  return res;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

namespace {

std::string g17(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number()) {
    std::ostringstream o;
    o.precision(17);
    o << v.get<double>();
    return o.str();
  }
  return csv_escape(v.get<std::string>());
}

std::string f4(const json& v) {
  if (!v.is_number()) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
  return buf;
}

std::string pct(const json& v) {
  if (!v.is_number()) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v.get<double>());
  return buf;
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : width_(header.size()) { row_strings(header); }

  void row(const std::vector<json>& fields) {
    std::vector<std::string> s;
    for (const auto& f : fields) s.push_back(g17(f));
    row_strings(s);
  }

  const std::string& text() const { return text_; }

 private:
  void row_strings(const std::vector<std::string>& s) {
    if (s.size() != width_) throw StateError("csv row width mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) text_ += (i ? "," : "") + s[i];
    text_ += "\n";
  }

  std::size_t width_;
  std::string text_;
};

struct Cell {
  const json* rec;
  std::string label;
  double bin_hours;
  bool history;
  std::string arch;
  std::string reward;  // "short" or "long-c<C>"
  const json& eval() const { return rec->at("eval"); }
};

std::string reward_label(const json& r) {
  if (r.at("kind").get<std::string>() == "short_term") return "short";
  std::ostringstream o;
  o << "long-c" << r.at("c").get<double>();
  return o.str();
}

std::string group_key(const Cell& c, const std::string& skip) {
  std::ostringstream o;
  if (skip != "bin") o << c.bin_hours << "h ";
  if (skip != "history") o << (c.history ? "hist " : "nohist ");
  if (skip != "arch") o << c.arch << " ";
  if (skip != "reward") o << c.reward;
  std::string s = o.str();
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

const char* treatment_name(const char* t) { return std::string(t) == "iv" ? "IV fluid" : "Vasopressor"; }

metrics::ActionSets action_sets(const json& j) { return j.get<metrics::ActionSets>(); }

}  // namespace

std::vector<fs::path> write_report(const std::vector<json>& records_in, const fs::path& dir) {
  if (records_in.empty()) throw DataError("report needs at least one record");
  std::vector<json> records = records_in;
  std::sort(records.begin(), records.end(), [](const json& a, const json& b) {
    return std::make_pair(a.at("label").get<std::string>(), a.at("config_hash").get<std::string>()) <
           std::make_pair(b.at("label").get<std::string>(), b.at("config_hash").get<std::string>());
  });
  fs::create_directories(dir);
  std::vector<fs::path> files;
  std::map<std::string, std::string> csvs;

  std::vector<Cell> ok;
  for (const auto& r : records) {
    if (!r.at("ok").get<bool>()) continue;
    const auto& cfg = r.at("config");
    ok.push_back({&r, r.at("label").get<std::string>(), cfg.at("bin_hours").get<double>(),
                  cfg.at("include_history").get<bool>(), cfg.at("embedding").get<std::string>(),
                  reward_label(cfg.at("reward"))});
  }

  std::string md = "# Sensitivity report\n\n";

  // Cells overview.
  Csv cells({"label", "config_hash", "ok", "failed_stage", "method", "selected_seed", "selection_value",
             "selected_wdr", "selected_wdr_se", "ground_truth", "ground_truth_se", "max_cv", "q_spread"});
  md += "## Cells\n\n| cell | status | method | selected seed | selection value | WDR (SE) | ground truth (SE) | max c_v "
        "| Q spread |\n|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : records) {
    const std::string label = r.at("label");
    if (!r.at("ok").get<bool>()) {
      cells.row({label, r.at("config_hash"), false, r.at("failed_stage"), nullptr, nullptr, nullptr, nullptr, nullptr,
                 nullptr, nullptr, nullptr, nullptr});
      md += "| " + label + " | FAILED at " + r.at("failed_stage").get<std::string>() + " | | | | | | | |\n";
      continue;
    }
    const auto& e = r.at("eval");
    const auto& sel = e.at("seeds").at(e.at("selected").get<std::size_t>());
    const json gt = e.at("ground_truth");
    const json gt_mean = gt.is_null() ? json(nullptr) : gt.at("mean");
    const json gt_se = gt.is_null() ? json(nullptr) : gt.at("standard_error");
    cells.row({label, r.at("config_hash"), true, "", e.at("method"), sel.at("seed"), sel.at("selection_value"),
               e.at("selected_wdr"), e.at("selected_wdr_se"), gt_mean, gt_se, e.at("max_cv"), e.at("q_spread")});
    md += "| " + label + " | ok | " + e.at("method").get<std::string>() + " | " + sel.at("seed").dump() + " | " +
          f4(sel.at("selection_value")) + " | " + f4(e.at("selected_wdr")) + " (" + f4(e.at("selected_wdr_se")) +
          ") | " + (gt.is_null() ? std::string("n/a") : f4(gt_mean) + " (" + f4(gt_se) + ")") + " | " +
          f4(e.at("max_cv")) + " | " + f4(e.at("q_spread")) + " |\n";
  }
  csvs["cells.csv"] = cells.text();

  // Per-cell tables.
  Csv seeds({"label", "seed", "snapshot_id", "selection_value", "mean_q", "wdr", "wdr_ess", "mean_vaso_bin",
             "mean_iv_bin", "selected"});
  Csv marg({"label", "treatment", "arm", "category", "point", "lo", "hi"});
  Csv rr({"label", "treatment", "category", "defined", "freq_policy", "freq_physician", "rr", "lo", "hi",
          "boot_mean"});
  Csv init({"label", "treatment", "arm", "events", "at_risk", "rate", "lo", "hi"});
  Csv cvs({"label", "action", "iv_bin", "vaso_bin", "mean", "sd", "cv", "defined"});
  Csv subs({"label", "bucket", "arm", "person_times", "vaso_nonzero_share", "iv_nonzero_share"});
  for (const auto& c : ok) {
    const auto& e = c.eval();
    for (const auto& s : e.at("seeds")) {
      seeds.row({c.label, s.at("seed"), s.at("snapshot_id"), s.at("selection_value"), s.at("mean_q"), s.at("wdr"),
                 s.at("wdr_ess"), s.at("mean_vaso_bin"), s.at("mean_iv_bin"), s.at("selected")});
    }
    for (const char* arm : {"policy", "physician"}) {
      std::string h = "iv_bin,vaso_bin,count,frequency\n";
      const auto& d = e.at(arm);
      for (int i = 0; i < 5; ++i) {
        for (int v = 0; v < 5; ++v) {
          h += std::to_string(i) + "," + std::to_string(v) + "," + d.at("counts")[i][v].dump() + "," +
               g17(d.at("frequencies")[i * 5 + v]) + "\n";
        }
      }
      csvs["heatmap_" + c.label + "_" + arm + ".csv"] = h;
      for (const char* t : {"iv", "vaso"}) {
        const auto& rows = e.at(std::string(arm) + "_" + t);
        for (std::size_t k = 0; k < 5; ++k) {
          marg.row({c.label, t, arm, std::string(metrics::kCategoryLabels[k]), rows[k].at("point"), rows[k].at("lo"),
                    rows[k].at("hi")});
        }
        const auto& ir = e.at("initiation").at(std::string(arm) + "_" + t);
        init.row({c.label, t, arm, ir.at("events"), ir.at("at_risk"), ir.at("rate").at("point"),
                  ir.at("rate").at("lo"), ir.at("rate").at("hi")});
      }
      for (const auto& g : e.at(std::string("subgroups_") + arm)) {
        subs.row({c.label, g.at("label"), arm, g.at("distribution").at("total"), g.at("vaso_nonzero_share"),
                  g.at("iv_nonzero_share")});
      }
    }
    for (const char* t : {"iv", "vaso"}) {
      const auto& rows = e.at(std::string("rr_") + t);
      for (std::size_t k = 0; k < 5; ++k) {
        const auto& x = rows[k];
        rr.row({c.label, t, std::string(metrics::kCategoryLabels[k]), x.at("defined"), x.at("freq_new"),
                x.at("freq_base"), x.at("rr").at("point"), x.at("rr").at("lo"), x.at("rr").at("hi"),
                x.at("rr").at("boot_mean")});
      }
    }
    const auto& cv = e.at("restart_cv");
    for (std::size_t a = 0; a < cv.size(); ++a) {
      cvs.row({c.label, a, a / 5, a % 5, cv[a].at("mean"), cv[a].at("sd"), cv[a].at("cv"), cv[a].at("defined")});
    }

    md += "\n## " + c.label + "\n\n";
    for (const char* t : {"vaso", "iv"}) {
      md += std::string("### ") + treatment_name(t) +
            "\n\n| category | policy % [95% CI] | physician % [95% CI] | RR [95% CI] |\n|---|---|---|---|\n";
      const auto& pol = e.at(std::string("policy_") + t);
      const auto& phy = e.at(std::string("physician_") + t);
      const auto& rrs = e.at(std::string("rr_") + t);
      for (std::size_t k = 0; k < 5; ++k) {
        md += "| " + std::string(metrics::kCategoryLabels[k]) + " | " + pct(pol[k].at("point")) + " [" +
              pct(pol[k].at("lo")) + ", " + pct(pol[k].at("hi")) + "] | " + pct(phy[k].at("point")) + " [" +
              pct(phy[k].at("lo")) + ", " + pct(phy[k].at("hi")) + "] | " +
              (rrs[k].at("defined").get<bool>()
                   ? f4(rrs[k].at("rr").at("point")) + " [" + f4(rrs[k].at("rr").at("lo")) + ", " +
                         f4(rrs[k].at("rr").at("hi")) + "]"
                   : std::string("undefined")) +
              " |\n";
      }
      md += "\n";
    }
    const auto& iv = e.at("initiation");
    md += "Vasopressor initiation rate: policy " + f4(iv.at("policy_vaso").at("rate").at("point")) + ", physician " +
          f4(iv.at("physician_vaso").at("rate").at("point")) + ".\n";
  }
  csvs["seeds.csv"] = seeds.text();
  csvs["marginals.csv"] = marg.text();
  csvs["relative_risk.csv"] = rr.text();
  csvs["initiation.csv"] = init.text();
  csvs["restart_cv.csv"] = cvs.text();
  csvs["subgroups.csv"] = subs.text();

  // Cross-cell comparisons: pairs of cells differing on exactly one axis.
  auto pairs_on = [&](const std::string& axis, auto&& first_pred) {
    std::vector<std::pair<const Cell*, const Cell*>> out;
    std::map<std::string, std::pair<const Cell*, const Cell*>> m;
    for (const auto& c : ok) {
      auto& slot = m[group_key(c, axis)];
      (first_pred(c) ? slot.first : slot.second) = &c;
    }
    for (const auto& [k, v] : m) {
      if (v.first && v.second) out.push_back(v);
    }
    return out;
  };

  // Treatment history.
  const auto hist = pairs_on("history", [](const Cell& c) { return c.history; });
  if (!hist.empty()) {
    Csv h({"group", "treatment", "category", "with_history", "no_history", "diff_pp"});
    md += "\n## Treatment history\n\n| group | mean vaso bin (history) | mean vaso bin (no history) |\n|---|---|---|\n";
    for (const auto& [w, n] : hist) {
      const std::string g = group_key(*w, "history");
      for (const char* t : {"iv", "vaso"}) {
        const auto mw = w->eval().at("policy").at(std::string(t) + "_marginal");
        const auto mn = n->eval().at("policy").at(std::string(t) + "_marginal");
        for (std::size_t k = 0; k < 5; ++k) {
          h.row({g, t, std::string(metrics::kCategoryLabels[k]), mw[k], mn[k],
                 100.0 * (mw[k].get<double>() - mn[k].get<double>())});
        }
      }
      const auto& sw = w->eval().at("seeds").at(w->eval().at("selected").get<std::size_t>());
      const auto& sn = n->eval().at("seeds").at(n->eval().at("selected").get<std::size_t>());
      md += "| " + g + " | " + f4(sw.at("mean_vaso_bin")) + " | " + f4(sn.at("mean_vaso_bin")) + " |\n";
    }
    csvs["history.csv"] = h.text();
  }

  // Bin duration: 4 hr minus 1 hr, in percentage points.
  const auto bins = pairs_on("bin", [](const Cell& c) { return c.bin_hours == 4.0; });
  if (!bins.empty()) {
    Csv b({"group", "treatment", "category", "freq_4hr", "freq_1hr", "diff_pp"});
    Csv bi({"group", "bin", "treatment", "rate", "lo", "hi"});
    md += "\n## Bin duration (4 hr - 1 hr, percentage points)\n\n| group | treatment | No action | 1st | 2nd | 3rd | 4th "
          "|\n|---|---|---|---|---|---|---|\n";
    for (const auto& [four, one] : bins) {
      const std::string g = group_key(*four, "bin");
      for (const char* t : {"vaso", "iv"}) {
        const auto m4 = four->eval().at("policy").at(std::string(t) + "_marginal");
        const auto m1 = one->eval().at("policy").at(std::string(t) + "_marginal");
        md += "| " + g + " | " + treatment_name(t);
        for (std::size_t k = 0; k < 5; ++k) {
          const double d = 100.0 * (m4[k].get<double>() - m1[k].get<double>());
          b.row({g, t, std::string(metrics::kCategoryLabels[k]), m4[k], m1[k], d});
          md += " | " + f4(d);
        }
        md += " |\n";
        for (const auto& [name, cell] : {std::pair{"4-hour", four}, std::pair{"1-hour", one}}) {
          const auto& r = cell->eval().at("initiation").at(std::string("policy_") + t).at("rate");
          bi.row({g, name, t, r.at("point"), r.at("lo"), r.at("hi")});
        }
      }
    }
    csvs["bin_diff.csv"] = b.text();
    csvs["initiation_bins.csv"] = bi.text();
  }

  // Embedding: GRU relative to LSTM, paired over test patients when they match.
  const auto arch = pairs_on("arch", [](const Cell& c) { return c.arch == "gru"; });
  if (!arch.empty()) {
    Csv a({"group", "treatment", "category", "freq_gru", "freq_lstm", "rr", "lo", "hi"});
    md += "\n## Embedding (GRU relative to LSTM)\n\n| group | treatment | category | RR [95% CI] |\n|---|---|---|---|\n";
    for (const auto& [gru, lstm] : arch) {
      const std::string g = group_key(*gru, "arch");
      const bool paired = gru->eval().at("test_patients") == lstm->eval().at("test_patients");
      const auto sg = action_sets(gru->eval().at("policy_actions"));
      const auto sl = action_sets(lstm->eval().at("policy_actions"));
      const auto& cfg = gru->rec->at("config");
      metrics::BootstrapConfig bc{cfg.at("n_boot").get<std::size_t>(), 0.95, cfg.at("boot_seed").get<std::uint64_t>(), 1};
      for (auto t : {metrics::Treatment::vaso, metrics::Treatment::iv}) {
        for (int k = 0; k < 5; ++k) {
          metrics::RiskRatio r;
          if (paired) {
            r = metrics::relative_risk(sg, sl, t, k, bc);
          } else {
            r.freq_new = metrics::action_distribution(sg).marginal(t)[k];
            r.freq_base = metrics::action_distribution(sl).marginal(t)[k];
            r.defined = r.freq_base > 0;
            r.rr.point = metrics::risk_ratio(r.freq_new, r.freq_base);
          }
          const auto tn = std::string(metrics::to_string(t));
          a.row({g, tn, std::string(metrics::kCategoryLabels[k]), r.freq_new, r.freq_base,
                 std::isfinite(r.rr.point) ? json(r.rr.point) : json(nullptr),
                 std::isfinite(r.rr.lo) ? json(r.rr.lo) : json(nullptr),
                 std::isfinite(r.rr.hi) ? json(r.rr.hi) : json(nullptr)});
          md += "| " + g + " | " + treatment_name(tn.c_str()) + " | " + std::string(metrics::kCategoryLabels[k]) +
                " | " +
                (r.defined ? f4(json(r.rr.point)) + " [" + f4(std::isfinite(r.rr.lo) ? json(r.rr.lo) : json()) +
                                 ", " + f4(std::isfinite(r.rr.hi) ? json(r.rr.hi) : json()) + "]"
                           : std::string("undefined")) +
                " |\n";
        }
      }
    }
    csvs["embedding_rr.csv"] = a.text();
  }

  // Reward sweep: every reward setting of otherwise equal cells.
  {
    std::map<std::string, std::vector<const Cell*>> groups;
    for (const auto& c : ok) groups[group_key(c, "reward")].push_back(&c);
    Csv rs({"group", "reward", "treatment", "category", "frequency"});
    bool any = false;
    for (const auto& [g, v] : groups) {
      if (v.size() < 2) continue;
      any = true;
      for (const auto* c : v) {
        for (const char* t : {"vaso", "iv"}) {
          const auto m = c->eval().at("policy").at(std::string(t) + "_marginal");
          for (std::size_t k = 0; k < 5; ++k) rs.row({g, c->reward, t, std::string(metrics::kCategoryLabels[k]), m[k]});
        }
      }
    }
    if (any) {
      csvs["reward_sweep.csv"] = rs.text();
      md += "\n## Reward horizon\n\nPolicy marginals per reward setting are in reward_sweep.csv.\n";
    }
  }

  // Restart variation by reward kind.
  {
    std::set<std::string> kinds;
    for (const auto& c : ok) kinds.insert(c.reward == "short" ? "short" : "long");
    Csv cc({"reward_kind", "label", "max_cv", "cells_above_0.5", "q_spread"});
    for (const auto& c : ok) {
      std::size_t above = 0;
      for (const auto& x : c.eval().at("restart_cv")) {
        if (x.at("defined").get<bool>() && x.at("cv").is_number() && x.at("cv").get<double>() > 0.5) ++above;
      }
      cc.row({c.reward == "short" ? "short" : "long", c.label, c.eval().at("max_cv"), above, c.eval().at("q_spread")});
    }
    csvs["cv_compare.csv"] = cc.text();
    if (kinds.size() == 2) {
      md += "\n## Restart variation by reward horizon\n\n| reward | cells | mean of max c_v |\n|---|---|---|\n";
      for (const auto& k : kinds) {
        double s = 0;
        std::size_t n = 0;
        for (const auto& c : ok) {
          const auto& m = c.eval().at("max_cv");
          if ((c.reward == "short") == (k == "short") && m.is_number()) s += m.get<double>(), ++n;
        }
        md += "| " + k + " | " + std::to_string(n) + " | " + (n ? f4(json(s / static_cast<double>(n))) : "n/a") +
              " |\n";
      }
    }
  }

  // Value estimates against simulator ground truth.
  {
    Csv v({"label", "method", "selected_wdr", "selected_wdr_se", "ground_truth", "ground_truth_se", "within_2se"});
    bool any = false;
    for (const auto& c : ok) {
      const auto& e = c.eval();
      const auto& gt = e.at("ground_truth");
      if (gt.is_null()) continue;
      any = true;
      const double se = std::hypot(e.at("selected_wdr_se").is_number() ? e.at("selected_wdr_se").get<double>() : 0.0,
                                   gt.at("standard_error").get<double>());
      const bool within =
          e.at("selected_wdr").is_number() && std::abs(e.at("selected_wdr").get<double>() - gt.at("mean").get<double>()) < 2 * se;
      v.row({c.label, e.at("method"), e.at("selected_wdr"), e.at("selected_wdr_se"), gt.at("mean"),
             gt.at("standard_error"), within});
    }
    if (any) {
      csvs["values.csv"] = v.text();
      md += "\n## Value estimates\n\nWDR of each selected policy against Monte Carlo ground truth is in values.csv.\n";
    }
  }

  // Write and self-check.
  write_file_atomic(dir / "report.md", md);
  files.push_back(dir / "report.md");
  for (const auto& [name, text] : csvs) {
    const fs::path p = dir / name;
    write_file_atomic(p, text);
    files.push_back(p);
    std::istringstream in(read_file(p));
    std::string line;
    std::getline(in, line);
    const std::size_t width = csv_split(line).size();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (csv_split(line).size() != width) {
        throw DataError(p.string() + ":" + std::to_string(lineno) + ": wrong field count");
      }
    }
  }
  return files;
}

std::vector<fs::path> write_report(const std::vector<RunRecord>& records, const fs::path& dir) {
  std::vector<json> js;
  for (const auto& r : records) js.push_back(to_json(r));
  return write_report(js, dir);
}

}  // namespace hemorl::harness
