#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "hemorl/errors.hpp"
#include "hemorl/harness/harness.hpp"
#include "hemorl/util.hpp"

namespace hemorl::harness {

using nlohmann::json;

namespace {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json discretize_to_json(const discretize::DiscretizeConfig& c) {
  return {{"re_anchor", c.re_anchor},       {"train_ratio", c.train_ratio}, {"val_fraction", c.val_fraction},
          {"seed", c.seed},                 {"channels", c.channels}};
}

void discretize_from_json(const json& j, discretize::DiscretizeConfig& c) {
  get_if(j, "re_anchor", c.re_anchor);
  get_if(j, "train_ratio", c.train_ratio);
  get_if(j, "val_fraction", c.val_fraction);
  get_if(j, "seed", c.seed);
  get_if(j, "channels", c.channels);
}

json embed_to_json(const embed::EmbedConfig& c) {
  return {{"hidden", c.hidden}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"lr", c.lr}, {"seed", c.seed}, {"teacher_forcing", c.teacher_forcing}};
}

void embed_from_json(const json& j, embed::EmbedConfig& c) {
  get_if(j, "hidden", c.hidden);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "max_epochs", c.max_epochs);
  get_if(j, "patience", c.patience);
  get_if(j, "lr", c.lr);
  get_if(j, "seed", c.seed);
  get_if(j, "teacher_forcing", c.teacher_forcing);
}

json mort_to_json(const reward::MortConfig& c) {
  return {{"l1", c.l1}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"seed", c.seed}};
}

void mort_from_json(const json& j, reward::MortConfig& c) {
  get_if(j, "l1", c.l1);
  get_if(j, "lr", c.lr);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "max_epochs", c.max_epochs);
  get_if(j, "patience", c.patience);
  get_if(j, "seed", c.seed);
}

json behavior_to_json(const ope::BehaviorConfig& c) {
  return {{"hidden", c.hidden}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"floor", c.floor}, {"seed", c.seed}};
}

void behavior_from_json(const json& j, ope::BehaviorConfig& c) {
  get_if(j, "hidden", c.hidden);
  get_if(j, "lr", c.lr);
  get_if(j, "batch_size", c.batch_size);
  get_if(j, "max_epochs", c.max_epochs);
  get_if(j, "patience", c.patience);
  get_if(j, "floor", c.floor);
  get_if(j, "seed", c.seed);
}

json reward_to_json(const reward::RewardSpec& r) {
  return {{"kind", std::string(reward::to_string(r.kind))}, {"c", r.c}, {"worst_sofa", r.worst_sofa}};
}

reward::RewardSpec reward_from_json(const json& j) {
  reward::RewardSpec r;
  if (j.contains("kind")) r.kind = reward::reward_kind_from_string(j.at("kind").get<std::string>());
  get_if(j, "c", r.c);
  get_if(j, "worst_sofa", r.worst_sofa);
  return r;
}

std::string short_number(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}

}  // namespace

json sim_params_to_json(const cohort::SimParams& p) {
  json ch = json::array();
  for (const auto& c : p.channels) ch.push_back({{"name", c.name}, {"rate_per_hour", c.rate_per_hour}});
  return {{"n_patients", p.n_patients},
          {"seed", p.seed},
          {"channels", ch},
          {"measurement_rate_scale", p.measurement_rate_scale},
          {"dt", p.dt},
          {"vaso_bp_gain", p.vaso_bp_gain},
          {"fluid_bp_gain", p.fluid_bp_gain},
          {"vaso_toxicity_gain", p.vaso_toxicity_gain},
          {"fluid_overload_sofa_gain", p.fluid_overload_sofa_gain},
          {"baseline_hazard", p.baseline_hazard},
          {"post_icu_hazard", p.post_icu_hazard},
          {"physician_noise", p.physician_noise},
          {"physician_review_rate", p.physician_review_rate},
          {"physician_hypotension_rate", p.physician_hypotension_rate},
          {"max_vaso_rate", p.max_vaso_rate},
          {"max_fluid_rate", p.max_fluid_rate}};
}

cohort::SimParams sim_params_from_json(const json& j) {
  cohort::SimParams p;
  get_if(j, "n_patients", p.n_patients);
  get_if(j, "seed", p.seed);
  if (j.contains("channels")) {
    p.channels.clear();
    for (const auto& c : j.at("channels")) p.channels.push_back({c.at("name"), c.value("rate_per_hour", 0.5)});
  }
  get_if(j, "measurement_rate_scale", p.measurement_rate_scale);
  get_if(j, "dt", p.dt);
  get_if(j, "vaso_bp_gain", p.vaso_bp_gain);
  get_if(j, "fluid_bp_gain", p.fluid_bp_gain);
  get_if(j, "vaso_toxicity_gain", p.vaso_toxicity_gain);
  get_if(j, "fluid_overload_sofa_gain", p.fluid_overload_sofa_gain);
  get_if(j, "baseline_hazard", p.baseline_hazard);
  get_if(j, "post_icu_hazard", p.post_icu_hazard);
  get_if(j, "physician_noise", p.physician_noise);
  get_if(j, "physician_review_rate", p.physician_review_rate);
  get_if(j, "physician_hypotension_rate", p.physician_hypotension_rate);
  get_if(j, "max_vaso_rate", p.max_vaso_rate);
  get_if(j, "max_fluid_rate", p.max_fluid_rate);
  return p;
}

void ExperimentConfig::validate() const {
  if (source.kind == SourceKind::simulate) {
    source.sim.validate();
  } else if (source.events.empty() || source.static_csv.empty()) {
    throw ConfigError("ingest source needs both an events and a static file");
  }
  if (bin_hours != 1.0 && bin_hours != 4.0) throw ConfigError("bin_hours must be 1 or 4");
  reward.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  discretize_config().validate();
  embed_config().validate();
  mort.validate();
  agent_config(seeds.front()).validate();
  behavior.validate();
  if (!(eval_epsilon > 0.0 && eval_epsilon <= 1.0)) throw ConfigError("eval_epsilon must be in (0, 1]");
  if (n_boot < 2) throw ConfigError("n_boot must be >= 2");
}

std::string ExperimentConfig::label() const {
  std::string s = short_number(bin_hours) + "h-" + (include_history ? "hist" : "nohist") + "-" +
                  std::string(embed::to_string(embedding)) + "-";
  if (reward.kind == reward::RewardKind::short_term) return s + "short";
  return s + "long-c" + short_number(reward.c);
}

discretize::DiscretizeConfig ExperimentConfig::discretize_config() const {
  auto c = discretize;
  c.bin_hours = bin_hours;
  c.include_history = include_history;
  return c;
}

embed::EmbedConfig ExperimentConfig::embed_config() const {
  auto c = embed;
  c.arch = embedding;
  return c;
}

agent::TrainConfig ExperimentConfig::agent_config(std::uint64_t seed) const {
  auto c = agent;
  c.seed = seed;
  return c;
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.source.sim.n_patients = 200;
  c.embed.hidden = 32;
  c.embed.max_epochs = 60;
  c.agent.hidden = 32;
  c.agent.steps = 20000;
  c.agent.target_sync = 1000;
  c.agent.log_every = 1000;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json src;
  if (c.source.kind == SourceKind::simulate) {
    src = {{"kind", "simulate"}, {"sim", sim_params_to_json(c.source.sim)}};
  } else {
    src = {{"kind", "ingest"}, {"events", c.source.events.string()}, {"static", c.source.static_csv.string()}};
  }
  auto agent = agent::train_config_to_json(c.agent);
  agent.erase("seed");
  return {{"schema_version", kRecordSchemaVersion},
          {"source", src},
          {"bin_hours", c.bin_hours},
          {"include_history", c.include_history},
          {"embedding", std::string(embed::to_string(c.embedding))},
          {"reward", reward_to_json(c.reward)},
          {"seeds", c.seeds},
          {"discretize", discretize_to_json(c.discretize)},
          {"embed", embed_to_json(c.embed)},
          {"mort", mort_to_json(c.mort)},
          {"agent", agent},
          {"behavior", behavior_to_json(c.behavior)},
          {"eval_epsilon", c.eval_epsilon},
          {"n_boot", c.n_boot},
          {"boot_seed", c.boot_seed},
          {"ground_truth_rollouts", c.ground_truth_rollouts},
          {"threads", c.threads}};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("source")) {
      const auto& s = j.at("source");
      const auto kind = s.value("kind", std::string("simulate"));
      if (kind == "simulate") {
        c.source.kind = SourceKind::simulate;
        if (s.contains("sim")) c.source.sim = sim_params_from_json(s.at("sim"));
      } else if (kind == "ingest") {
        c.source.kind = SourceKind::ingest;
        c.source.events = s.at("events").get<std::string>();
        c.source.static_csv = s.at("static").get<std::string>();
      } else {
        throw ConfigError("unknown source kind '" + kind + "'");
      }
    }
    get_if(j, "bin_hours", c.bin_hours);
    get_if(j, "include_history", c.include_history);
    if (j.contains("embedding")) c.embedding = embed::arch_from_string(j.at("embedding").get<std::string>());
    if (j.contains("reward")) c.reward = reward_from_json(j.at("reward"));
    get_if(j, "seeds", c.seeds);
    if (j.contains("discretize")) discretize_from_json(j.at("discretize"), c.discretize);
    if (j.contains("embed")) embed_from_json(j.at("embed"), c.embed);
    if (j.contains("mort")) mort_from_json(j.at("mort"), c.mort);
    if (j.contains("agent")) {
      auto a = agent::train_config_to_json(c.agent);
      a.merge_patch(j.at("agent"));
      c.agent = agent::train_config_from_json(a);
    }
    if (j.contains("behavior")) behavior_from_json(j.at("behavior"), c.behavior);
    get_if(j, "eval_epsilon", c.eval_epsilon);
    get_if(j, "n_boot", c.n_boot);
    get_if(j, "boot_seed", c.boot_seed);
    get_if(j, "ground_truth_rollouts", c.ground_truth_rollouts);
    get_if(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("threads");
  auto seeds = c.seeds;
  std::sort(seeds.begin(), seeds.end());
  j["seeds"] = seeds;
  return canonical_hash(j);
}

}  // namespace hemorl::harness
