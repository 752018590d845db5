#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <random>

#include "hemorl/errors.hpp"
#include "hemorl/harness/harness.hpp"
#include "hemorl/util.hpp"

namespace hemorl::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::data: return "data";
    case Stage::dataset: return "dataset";
    case Stage::embed: return "embed";
    case Stage::mortality: return "mortality";
    case Stage::behavior: return "behavior";
    case Stage::agent: return "agent";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Online policy and rollout rewards
// ---------------------------------------------------------------------------

namespace {

class LearnedBinPolicy final : public cohort::BinPolicy {
 public:
  LearnedBinPolicy(const discretize::Prep& prep, const cohort::StaticFeatures& statics,
                   const embed::EmbedModel& embed, const agent::QNetwork& q, double epsilon, std::uint64_t seed)
      : features_(prep, statics), session_(embed), q_(&q), epsilon_(epsilon), rng_(seed) {}

  int act(const cohort::EventLog& so_far, double bin_start, double bin_end) override {
    const auto x = features_.push(discretize::make_bin(so_far, bin_start, bin_end));
    const auto s = session_.step(x);
    const auto p = agent::epsilon_soft(q_->q_values(s), epsilon_);
    std::discrete_distribution<int> pick(p.begin(), p.end());
    return pick(rng_);
  }

 private:
  discretize::FeatureBuilder features_;
  embed::EmbedSession session_;
  const agent::QNetwork* q_;
  double epsilon_;
  std::mt19937_64 rng_;
};

}  // namespace

cohort::BinPolicyFactory learned_policy_factory(const discretize::Prep& prep, const embed::EmbedModel& embed,
                                                const agent::QNetwork& q, double epsilon) {
  return [&prep, &embed, &q, epsilon](const cohort::EventLog& header, std::uint64_t seed) {
    return std::make_unique<LearnedBinPolicy>(prep, header.statics, embed, q, epsilon, seed);
  };
}

cohort::RewardFn rollout_reward_fn(const discretize::Prep& prep, const embed::EmbedModel& embed,
                                   const reward::RewardSpec& spec, const reward::MortModel* mort) {
  if (spec.kind == reward::RewardKind::short_term && mort == nullptr) {
    throw ConfigError("short-term rollout rewards need a mortality model");
  }
  return [&prep, &embed, spec, mort](const cohort::EventLog& log) {
    discretize::RebinOptions opt{prep.config.bin_hours, prep.config.re_anchor};
    const auto ep = discretize::featurize(discretize::rebin(log, opt), prep);
    if (spec.kind == reward::RewardKind::long_term) return reward::long_term_rewards(ep, spec);
    const Tensor e = embed.embed_sequence(ep.features);
    return reward::short_term_rewards(mort->probabilities(e));
  };
}

// ---------------------------------------------------------------------------
// Stage cache
// ---------------------------------------------------------------------------

namespace {

class StageCache {
 public:
  StageCache(fs::path root, RunRecord& rec) : root_(std::move(root)), rec_(&rec) {}

  fs::path dir(Stage s, const std::string& hash) const { return root_ / "cache" / std::string(to_string(s)) / hash; }

  bool complete(Stage s, const std::string& hash) const { return fs::exists(dir(s, hash) / "complete"); }

  /// Runs `make` into a fresh directory unless a complete entry exists.
  template <typename Make>
  fs::path ensure(Stage s, const std::string& hash, Make&& make) {
    const fs::path d = dir(s, hash);
    const std::string key = std::string(to_string(s)) + ":" + hash.substr(0, 12);
    if (complete(s, hash)) {
      note(rec_->stages_cached, key);
      return d;
    }
    fs::remove_all(d);
    fs::create_directories(d);
    make(d);
    write_file_atomic(d / "complete", hash + "\n");
    note(rec_->stages_run, key);
    return d;
  }

 private:
  void note(std::vector<std::string>& v, const std::string& key) {
    std::lock_guard<std::mutex> lock(mu_);
    v.push_back(key);
  }

  fs::path root_;
  RunRecord* rec_;
  std::mutex mu_;
};

std::vector<const discretize::Episode*> ptrs(const std::vector<discretize::Episode>& eps) {
  std::vector<const discretize::Episode*> out;
  for (const auto& e : eps) out.push_back(&e);
  return out;
}

// Rows of every embedding, with one label per row.
Tensor stack(const std::vector<Tensor>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i, ++r) {
      const auto src = p.row_span(i);
      for (std::size_t c = 0; c < src.size(); ++c) out.at(r, c) = src[c];
    }
  }
  return out;
}

std::vector<int> row_mortality(const std::vector<const discretize::Episode*>& eps) {
  std::vector<int> y;
  for (const auto* e : eps) y.insert(y.end(), e->length(), reward::mortality_label(e->outcome));
  return y;
}

std::vector<int> row_actions(const std::vector<const discretize::Episode*>& eps) {
  std::vector<int> a;
  for (const auto* e : eps) a.insert(a.end(), e->actions.begin(), e->actions.end());
  return a;
}

json ci_json(const metrics::CI& c) { return metrics::to_json(c); }

template <std::size_t N>
json ci_array(const std::array<metrics::CI, N>& a) {
  json j = json::array();
  for (const auto& c : a) j.push_back(ci_json(c));
  return j;
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json rr_json(const metrics::RiskRatio& r) {
  return {{"defined", r.defined}, {"freq_new", r.freq_new}, {"freq_base", r.freq_base}, {"rr", ci_json(r.rr)}};
}

json init_json(const metrics::InitiationRate& r) {
  return {{"defined", r.defined}, {"events", r.events}, {"at_risk", r.at_risk}, {"rate", ci_json(r.rate)}};
}

json subgroups_json(const std::vector<metrics::Subgroup>& g) {
  json j = json::array();
  for (const auto& s : g) {
    j.push_back({{"label", s.bucket.label},
                 {"empty", s.empty},
                 {"distribution", metrics::to_json(s.dist)},
                 {"vaso_nonzero_share", s.dist.nonzero_share(metrics::Treatment::vaso)},
                 {"iv_nonzero_share", s.dist.nonzero_share(metrics::Treatment::iv)}});
  }
  return j;
}

double mean_bin(const metrics::ActionDistribution& d, metrics::Treatment t) {
  const auto m = d.marginal(t);
  double s = 0.0;
  for (std::size_t k = 0; k < 5; ++k) s += static_cast<double>(k) * m[k];
  return s;
}

}  // namespace

json to_json(const EvalReport& r) {
  json seeds = json::array();
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    const auto& s = r.seeds[i];
    seeds.push_back({{"seed", s.seed},
                     {"snapshot_id", s.snapshot_id},
                     {"selection_value", num(s.selection_value)},
                     {"mean_q", num(s.mean_q)},
                     {"wdr", num(s.wdr)},
                     {"wdr_ess", num(s.wdr_ess)},
                     {"distribution", metrics::to_json(s.dist)},
                     {"mean_vaso_bin", s.mean_vaso_bin},
                     {"mean_iv_bin", s.mean_iv_bin},
                     {"selected", i == r.selected}});
  }
  json cv = json::array();
  for (const auto& c : r.restart_cv) {
    cv.push_back({{"mean", c.mean}, {"sd", c.sd}, {"cv", num(c.cv)}, {"defined", c.defined}});
  }
  json rr_iv = json::array(), rr_vaso = json::array();
  for (std::size_t k = 0; k < 5; ++k) {
    rr_iv.push_back(rr_json(r.rr_iv[k]));
    rr_vaso.push_back(rr_json(r.rr_vaso[k]));
  }
  json j = {{"method", std::string(ope::to_string(r.method))},
            {"selected", r.selected},
            {"seeds", seeds},
            {"test_patients", r.test_patients},
            {"policy_actions", r.policy_actions},
            {"physician_actions", r.physician_actions},
            {"policy", metrics::to_json(r.policy)},
            {"physician", metrics::to_json(r.physician)},
            {"policy_iv", ci_array(r.policy_iv)},
            {"policy_vaso", ci_array(r.policy_vaso)},
            {"physician_iv", ci_array(r.physician_iv)},
            {"physician_vaso", ci_array(r.physician_vaso)},
            {"rr_iv", rr_iv},
            {"rr_vaso", rr_vaso},
            {"diff_iv", ci_array(r.diff_iv)},
            {"diff_vaso", ci_array(r.diff_vaso)},
            {"initiation",
             {{"policy_vaso", init_json(r.init_policy_vaso)},
              {"physician_vaso", init_json(r.init_physician_vaso)},
              {"policy_iv", init_json(r.init_policy_iv)},
              {"physician_iv", init_json(r.init_physician_iv)}}},
            {"restart_cv", cv},
            {"max_cv", num(r.max_cv)},
            {"q_spread", num(r.q_spread)},
            {"subgroups_policy", subgroups_json(r.sub_policy)},
            {"subgroups_physician", subgroups_json(r.sub_physician)},
            {"behavior_train_accuracy", num(r.behavior_train_accuracy)},
            {"behavior_val_accuracy", num(r.behavior_val_accuracy)},
            {"selected_wdr", num(r.selected_wdr)},
            {"selected_wdr_se", num(r.selected_wdr_se)},
            {"ground_truth", nullptr}};
  if (r.ground_truth) {
    j["ground_truth"] = {{"mean", r.ground_truth->mean},
                         {"standard_error", r.ground_truth->standard_error},
                         {"n", r.ground_truth->n}};
  }
  return j;
}

json to_json(const RunRecord& r) {
  json j = {{"schema_version", kRecordSchemaVersion},
            {"version", kVersion},
            {"config_hash", r.config_hash},
            {"label", r.label},
            {"config", r.config},
            {"ok", r.ok},
            {"failed_stage", r.failed_stage},
            {"error", r.error},
            {"snapshot_ids", r.snapshot_ids},
            {"stages_run", r.stages_run},
            {"stages_cached", r.stages_cached},
            {"wall_clock_seconds", r.wall_clock_seconds},
            {"eval", nullptr}};
  if (r.eval) j["eval"] = to_json(*r.eval);
  return j;
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

namespace {

struct Pipeline {
  const ExperimentConfig& cfg;
  fs::path out;
  RunRecord& rec;
  StageCache cache;
  Stage until;
  Stage stage = Stage::data;

  Pipeline(const ExperimentConfig& c, fs::path o, RunRecord& r, Stage u)
      : cfg(c), out(o), rec(r), cache(o, r), until(u) {}

  void run();
};

void Pipeline::run() {
  // data
  stage = Stage::data;
  std::string data_hash;
  std::vector<cohort::EventLog> logs;
  if (cfg.source.kind == SourceKind::simulate) {
    data_hash = canonical_hash({{"stage", "data"}, {"sim", sim_params_to_json(cfg.source.sim)}});
    const auto d = cache.ensure(Stage::data, data_hash, [&](const fs::path& dir) {
      const auto sim = cohort::simulate_cohort(cfg.source.sim, cfg.threads);
      cohort::write_events_jsonl(sim, dir / "events.jsonl");
      cohort::write_static_csv(sim, dir / "static.csv");
    });
    logs = cohort::ingest_events(d / "events.jsonl", d / "static.csv").logs;
  } else {
    data_hash = canonical_hash({{"stage", "data"},
                                {"events", sha256_file(cfg.source.events)},
                                {"static", sha256_file(cfg.source.static_csv)}});
    logs = cohort::ingest_events(cfg.source.events, cfg.source.static_csv).logs;
  }

  if (until == Stage::data) return;
  // dataset
  stage = Stage::dataset;
  const auto dcfg = cfg.discretize_config();
  const std::string dataset_hash = canonical_hash({{"stage", "dataset"},
                                                   {"data", data_hash},
                                                   {"bin_hours", dcfg.bin_hours},
                                                   {"re_anchor", dcfg.re_anchor},
                                                   {"include_history", dcfg.include_history},
                                                   {"train_ratio", dcfg.train_ratio},
                                                   {"val_fraction", dcfg.val_fraction},
                                                   {"seed", dcfg.seed},
                                                   {"channels", dcfg.channels}});
  const auto ds_dir = cache.ensure(Stage::dataset, dataset_hash, [&](const fs::path& dir) {
    discretize::save_dataset(discretize::build_dataset(logs, dcfg, cfg.threads), dir);
  });
  const discretize::Dataset data = discretize::load_dataset(ds_dir);
  const auto train = ptrs(data.train), val = ptrs(data.val), test = ptrs(data.test);
  const auto side = data.training_side();
  const std::string phash = discretize::prep_hash(data.prep);

  if (until == Stage::dataset) return;
  // embed
  stage = Stage::embed;
  const auto ecfg = cfg.embed_config();
  json ej = {{"stage", "embed"},       {"dataset", dataset_hash},     {"arch", std::string(embed::to_string(ecfg.arch))},
             {"hidden", ecfg.hidden},  {"batch_size", ecfg.batch_size}, {"max_epochs", ecfg.max_epochs},
             {"patience", ecfg.patience}, {"lr", ecfg.lr},            {"seed", ecfg.seed}};
  const std::string embed_hash = canonical_hash(ej);
  const auto e_dir = cache.ensure(Stage::embed, embed_hash, [&](const fs::path& dir) {
    auto res = embed::train_autoencoder(train, val, ecfg, data.prep.features, phash);
    res.model.save(dir / "embed.json");
    json curve = json::array();
    for (const auto& c : res.curve) curve.push_back({{"epoch", c.epoch}, {"train_mse", c.train_mse}, {"val_mse", c.val_mse}});
    write_file_atomic(dir / "curve.json", json{{"best_epoch", res.best_epoch}, {"curve", curve}}.dump(2));
  });
  const embed::EmbedModel emb = embed::EmbedModel::load(e_dir / "embed.json", phash);
  const auto e_train = embed::embed_all(emb, train, cfg.threads);
  const auto e_val = embed::embed_all(emb, val, cfg.threads);
  const auto e_test = embed::embed_all(emb, test, cfg.threads);
  std::vector<Tensor> e_side = e_train;
  e_side.insert(e_side.end(), e_val.begin(), e_val.end());

  if (until == Stage::embed) return;
  // mortality model
  stage = Stage::mortality;
  std::optional<reward::MortModel> mort;
  std::string mort_hash;
  if (cfg.reward.kind == reward::RewardKind::short_term) {
    mort_hash = canonical_hash({{"stage", "mortality"},
                                {"embed", embed_hash},
                                {"l1", cfg.mort.l1},
                                {"lr", cfg.mort.lr},
                                {"batch_size", cfg.mort.batch_size},
                                {"max_epochs", cfg.mort.max_epochs},
                                {"patience", cfg.mort.patience},
                                {"seed", cfg.mort.seed}});
    const auto m_dir = cache.ensure(Stage::mortality, mort_hash, [&](const fs::path& dir) {
      const auto res = reward::train_mortality_model(stack(e_train, emb.hidden()), row_mortality(train),
                                                     stack(e_val, emb.hidden()), row_mortality(val), cfg.mort);
      res.model.save(dir / "mort.json", {{"val_auc", num(res.val_auc)}, {"best_epoch", res.best_epoch}});
    });
    mort = reward::MortModel::load(m_dir / "mort.json");
  }
  const auto r_side = reward::attach_rewards(side, cfg.reward, &e_side, mort ? &*mort : nullptr);
  const auto r_test = reward::attach_rewards(test, cfg.reward, &e_test, mort ? &*mort : nullptr);

  if (until == Stage::mortality) return;
  // behaviour policy
  stage = Stage::behavior;
  const std::string beh_hash = canonical_hash({{"stage", "behavior"},
                                               {"embed", embed_hash},
                                               {"hidden", cfg.behavior.hidden},
                                               {"lr", cfg.behavior.lr},
                                               {"batch_size", cfg.behavior.batch_size},
                                               {"max_epochs", cfg.behavior.max_epochs},
                                               {"patience", cfg.behavior.patience},
                                               {"floor", cfg.behavior.floor},
                                               {"seed", cfg.behavior.seed}});
  const auto b_dir = cache.ensure(Stage::behavior, beh_hash, [&](const fs::path& dir) {
    const auto fit = ope::fit_behavior_policy(stack(e_train, emb.hidden()), row_actions(train),
                                              stack(e_val, emb.hidden()), row_actions(val), cfg.behavior);
    fit.model.save(dir / "behavior.json");
    write_file_atomic(dir / "fit.json", json{{"train_accuracy", num(fit.train_accuracy)},
                                             {"val_accuracy", num(fit.val_accuracy)},
                                             {"val_nll", num(fit.val_nll)},
                                             {"best_epoch", fit.best_epoch}}
                                            .dump(2));
  });
  const ope::BehaviorModel behavior = ope::BehaviorModel::load(b_dir / "behavior.json");
  const json fit_info = json::parse(read_file(b_dir / "fit.json"));

  if (until == Stage::behavior) return;
  // agents, one per seed
  stage = Stage::agent;
  const agent::TransitionSet transitions = agent::build_transitions(side, e_side, r_side.rewards);
  json reward_json = {{"kind", std::string(reward::to_string(cfg.reward.kind))}, {"c", cfg.reward.c},
                      {"worst_sofa", cfg.reward.worst_sofa}, {"mortality", mort_hash}};
  std::vector<fs::path> snap_dirs(cfg.seeds.size());
  parallel_for(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const auto acfg = cfg.agent_config(cfg.seeds[i]);
        const std::string h = canonical_hash(
            {{"stage", "agent"}, {"embed", embed_hash}, {"reward", reward_json}, {"config", agent::train_config_to_json(acfg)}});
        snap_dirs[i] = cache.ensure(Stage::agent, h, [&](const fs::path& dir) {
          auto snap = agent::train(transitions, acfg);
          snap.embed_hash = embed_hash;
          snap.reward_spec = reward_json;
          snap.save(dir);
        });
      },
      cfg.threads);
  std::vector<agent::PolicySnapshot> snaps;
  for (const auto& d : snap_dirs) {
    snaps.push_back(agent::PolicySnapshot::load(d));
    rec.snapshot_ids.push_back(sha256_file(d / "qnet.json"));
  }

  if (until == Stage::agent) return;
  // evaluation
  stage = Stage::evaluate;
  EvalReport ev;
  ev.method = cfg.reward.kind == reward::RewardKind::short_term ? ope::SelectMethod::wdr : ope::SelectMethod::mean_q;
  ope::EvalData eval{test, e_test, r_test.rewards};
  std::vector<const agent::PolicySnapshot*> sp;
  for (const auto& s : snaps) sp.push_back(&s);
  const double gamma = cfg.agent.gamma;
  const auto sel = ope::select_restart(sp, ev.method, eval, &behavior, gamma, cfg.eval_epsilon);
  ev.selected = sel.index;
  const Tensor test_states = eval.all_states();
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    SeedResult s;
    s.seed = cfg.seeds[i];
    s.snapshot_id = rec.snapshot_ids[i];
    s.selection_value = sel.values[i];
    s.mean_q = ope::mean_max_q(snaps[i].network, test_states);
    if (!sel.wdr.empty()) {
      s.wdr = sel.wdr[i].value;
      s.wdr_ess = sel.wdr[i].ess;
    }
    s.dist = metrics::action_distribution(metrics::policy_actions(snaps[i].network, e_test));
    s.mean_vaso_bin = mean_bin(s.dist, metrics::Treatment::vaso);
    s.mean_iv_bin = mean_bin(s.dist, metrics::Treatment::iv);
    ev.seeds.push_back(std::move(s));
  }
  for (const auto* e : test) ev.test_patients.push_back(e->patient_id);
  const auto& chosen = snaps[ev.selected].network;
  ev.policy_actions = metrics::policy_actions(chosen, e_test);
  ev.physician_actions = metrics::physician_actions(test);
  ev.policy = metrics::action_distribution(ev.policy_actions);
  ev.physician = metrics::action_distribution(ev.physician_actions);

  metrics::BootstrapConfig bc{cfg.n_boot, 0.95, cfg.boot_seed, cfg.threads};
  using metrics::Treatment;
  ev.policy_iv = metrics::marginal_cis(ev.policy_actions, Treatment::iv, bc);
  ev.policy_vaso = metrics::marginal_cis(ev.policy_actions, Treatment::vaso, bc);
  ev.physician_iv = metrics::marginal_cis(ev.physician_actions, Treatment::iv, bc);
  ev.physician_vaso = metrics::marginal_cis(ev.physician_actions, Treatment::vaso, bc);
  for (int k = 0; k < 5; ++k) {
    ev.rr_iv[k] = metrics::relative_risk(ev.policy_actions, ev.physician_actions, Treatment::iv, k, bc);
    ev.rr_vaso[k] = metrics::relative_risk(ev.policy_actions, ev.physician_actions, Treatment::vaso, k, bc);
  }
  ev.diff_iv = metrics::paired_difference_cis(ev.policy_actions, ev.physician_actions, Treatment::iv, bc);
  ev.diff_vaso = metrics::paired_difference_cis(ev.policy_actions, ev.physician_actions, Treatment::vaso, bc);
  ev.init_policy_vaso = metrics::initiation_rate(ev.policy_actions, Treatment::vaso, bc);
  ev.init_physician_vaso = metrics::initiation_rate(ev.physician_actions, Treatment::vaso, bc);
  ev.init_policy_iv = metrics::initiation_rate(ev.policy_actions, Treatment::iv, bc);
  ev.init_physician_iv = metrics::initiation_rate(ev.physician_actions, Treatment::iv, bc);

  if (snaps.size() >= 2) {
    std::vector<metrics::ActionDistribution> dists;
    std::vector<double> qs;
    for (const auto& s : ev.seeds) dists.push_back(s.dist), qs.push_back(s.mean_q);
    ev.restart_cv = metrics::restart_cv(dists);
    ev.max_cv = metrics::max_cv(ev.restart_cv);
    const double mean = compensated_sum(qs) / static_cast<double>(qs.size());
    const auto [lo, hi] = std::minmax_element(qs.begin(), qs.end());
    ev.q_spread = mean != 0.0 ? (*hi - *lo) / std::abs(mean) : std::numeric_limits<double>::quiet_NaN();
  }

  const auto sofa = metrics::episode_sofa(test);
  const bool sofa_ok = std::all_of(sofa.begin(), sofa.end(), [](const auto& v) {
    return std::none_of(v.begin(), v.end(), [](double x) { return std::isnan(x); });
  });
  if (sofa_ok) {
    ev.sub_policy = metrics::subgroup_distributions(ev.policy_actions, sofa);
    ev.sub_physician = metrics::subgroup_distributions(ev.physician_actions, sofa);
  }
  ev.behavior_train_accuracy = fit_info.value("train_accuracy", std::numeric_limits<double>::quiet_NaN());
  if (fit_info.at("val_accuracy").is_number()) ev.behavior_val_accuracy = fit_info.at("val_accuracy").get<double>();

  // WDR of the selected policy with a trajectory bootstrap SE.
  const auto trs = ope::build_trajectories(chosen, behavior, eval, cfg.eval_epsilon);
  ev.selected_wdr = ope::wdr_value(trs, gamma).value;
  if (trs.size() >= 2) {
    const auto reps = metrics::bootstrap_replicates(
        trs.size(),
        [&](std::span<const std::size_t> idx) {
          std::vector<ope::OpeTrajectory> sub;
          sub.reserve(idx.size());
          for (std::size_t i : idx) sub.push_back(trs[i]);
          return std::vector<double>{ope::wdr_value(sub, gamma).value};
        },
        bc);
    CompensatedSum s, ss;
    for (const auto& r : reps) s.add(r[0]);
    const double m = s.value() / static_cast<double>(reps.size());
    for (const auto& r : reps) ss.add((r[0] - m) * (r[0] - m));
    ev.selected_wdr_se = std::sqrt(ss.value() / static_cast<double>(reps.size() - 1));
  }

  if (cfg.source.kind == SourceKind::simulate && cfg.ground_truth_rollouts > 0) {
    cohort::GridController ctrl(cfg.bin_hours, data.prep.binning.action_rates(),
                                learned_policy_factory(data.prep, emb, chosen, cfg.eval_epsilon));
    ev.ground_truth = cohort::ground_truth_value(ctrl, cfg.source.sim, cfg.ground_truth_rollouts, gamma,
                                                 rollout_reward_fn(data.prep, emb, cfg.reward, mort ? &*mort : nullptr),
                                                 cfg.threads);
  }
  rec.eval = std::move(ev);
}

void append_results(const fs::path& out, const RunRecord& rec) {
  if (!rec.eval) return;
  std::ofstream f(out / "results.jsonl", std::ios::app);
  const auto& ev = *rec.eval;
  for (std::size_t i = 0; i < ev.seeds.size(); ++i) {
    const auto& s = ev.seeds[i];
    json line = {{"schema_version", kRecordSchemaVersion},
                 {"config_hash", rec.config_hash},
                 {"label", rec.label},
                 {"seed", s.seed},
                 {"snapshot_id", s.snapshot_id},
                 {"method", std::string(ope::to_string(ev.method))},
                 {"value", num(s.selection_value)},
                 {"ess", num(s.wdr_ess)},
                 {"diagnostics", {{"mean_q", num(s.mean_q)}, {"wdr", num(s.wdr)}, {"selected", i == ev.selected}}}};
    f << line.dump() << "\n";
  }
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& config, const fs::path& out, Stage until) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config_hash = config_hash(config);
  rec.label = config.label();
  rec.config = to_json(config);
  rec.config.erase("threads");
  fs::create_directories(out);
  Pipeline p(config, out, rec, until);
  try {
    p.run();
    rec.ok = true;
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.failed_stage = std::string(to_string(p.stage));
    rec.error = e.what();
    rec.eval.reset();
  }
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (until != Stage::evaluate && rec.ok) return rec;
  const fs::path run_dir = out / "runs" / rec.config_hash;
  fs::create_directories(run_dir);
  write_file_atomic(run_dir / "record.json", to_json(rec).dump(1));
  append_results(out, rec);
  return rec;
}

}  // namespace hemorl::harness
