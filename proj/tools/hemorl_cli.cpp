// hemorl: command line front end for the pipeline and the sensitivity grid.
//
// Exit codes: 0 ok, 1 config error, 2 stage failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hemorl/cohort/cohort.hpp"
#include "hemorl/errors.hpp"
#include "hemorl/harness/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hemorl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitStage = 2;

/// Flags shared by every pipeline subcommand. Unset flags leave the config
/// file (or the desk profile) untouched.
struct ConfigFlags {
  std::string config_file;
  std::optional<std::size_t> n_patients;
  std::optional<std::uint64_t> sim_seed;
  std::string events, static_csv;
  std::optional<double> bin_hours;
  std::optional<bool> history;
  std::string embedding;
  std::string reward;
  std::optional<double> c;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> embed_hidden, embed_epochs;
  std::optional<std::size_t> agent_hidden, steps;
  std::optional<double> eval_epsilon;
  std::optional<std::size_t> n_boot;
  std::optional<std::uint64_t> boot_seed;
  std::optional<std::size_t> gt_rollouts;
  std::optional<std::size_t> threads;
  bool show_config = false;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_file, "Experiment config JSON (default: desk profile)")->check(CLI::ExistingFile);
    app.add_option("--n-patients", n_patients, "Simulated patients");
    app.add_option("--sim-seed", sim_seed, "Simulator seed");
    app.add_option("--events", events, "events.jsonl to ingest instead of simulating");
    app.add_option("--static", static_csv, "static.csv to ingest");
    app.add_option("--bin-hours", bin_hours, "Bin duration in hours (1 or 4)");
    app.add_option("--history", history, "Include treatment history in the state (true/false)");
    app.add_option("--embedding", embedding, "lstm or gru");
    app.add_option("--reward", reward, "short_term or long_term");
    app.add_option("--c", c, "Long-term reward scale C");
    app.add_option("--seeds", seeds, "Agent restart seeds")->delimiter(',');
    app.add_option("--embed-hidden", embed_hidden, "Autoencoder hidden size");
    app.add_option("--embed-epochs", embed_epochs, "Autoencoder max epochs");
    app.add_option("--agent-hidden", agent_hidden, "Q-network hidden size");
    app.add_option("--steps", steps, "Agent training steps");
    app.add_option("--eval-epsilon", eval_epsilon, "Epsilon of the evaluated soft policy");
    app.add_option("--n-boot", n_boot, "Bootstrap replicates");
    app.add_option("--boot-seed", boot_seed, "Bootstrap seed");
    app.add_option("--gt-rollouts", gt_rollouts, "Simulator rollouts for ground-truth values (0 skips)");
    app.add_option("--threads", threads, "Worker threads");
    app.add_flag("--show-config", show_config, "Print the resolved config and exit");
  }

  harness::ExperimentConfig resolve() const {
    auto cfg = config_file.empty() ? harness::desk_config() : harness::load_config(config_file);
    if (n_patients) cfg.source.sim.n_patients = *n_patients;
    if (sim_seed) cfg.source.sim.seed = *sim_seed;
    if (!events.empty() || !static_csv.empty()) {
      cfg.source.kind = harness::SourceKind::ingest;
      cfg.source.events = events;
      cfg.source.static_csv = static_csv;
    }
    if (bin_hours) cfg.bin_hours = *bin_hours;
    if (history) cfg.include_history = *history;
    if (!embedding.empty()) cfg.embedding = embed::arch_from_string(embedding);
    if (!reward.empty()) cfg.reward.kind = reward::reward_kind_from_string(reward);
    if (c) cfg.reward.c = *c;
    if (!seeds.empty()) cfg.seeds = seeds;
    if (embed_hidden) cfg.embed.hidden = *embed_hidden;
    if (embed_epochs) cfg.embed.max_epochs = *embed_epochs;
    if (agent_hidden) cfg.agent.hidden = *agent_hidden;
    if (steps) cfg.agent.steps = *steps;
    if (eval_epsilon) cfg.eval_epsilon = *eval_epsilon;
    if (n_boot) cfg.n_boot = *n_boot;
    if (boot_seed) cfg.boot_seed = *boot_seed;
    if (gt_rollouts) cfg.ground_truth_rollouts = *gt_rollouts;
    if (threads) cfg.threads = *threads;
    cfg.validate();
    return cfg;
  }
};

fs::path default_out() {
  if (const char* env = std::getenv(harness::kOutputEnv); env && *env) return env;
  return "hemorl_out";
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

int finish(const harness::RunRecord& rec) {
  json j = {{"label", rec.label},
            {"config_hash", rec.config_hash},
            {"ok", rec.ok},
            {"stages_run", rec.stages_run},
            {"stages_cached", rec.stages_cached},
            {"wall_clock_seconds", rec.wall_clock_seconds}};
  if (!rec.ok) {
    j["failed_stage"] = rec.failed_stage;
    j["error"] = rec.error;
  }
  if (rec.eval) {
    const auto& e = *rec.eval;
    j["selection_method"] = std::string(ope::to_string(e.method));
    j["selected_seed"] = e.seeds.at(e.selected).seed;
    j["snapshot_ids"] = rec.snapshot_ids;
    j["selected_wdr"] = e.selected_wdr;
    j["selected_wdr_se"] = e.selected_wdr_se;
    if (e.ground_truth) j["ground_truth"] = {{"mean", e.ground_truth->mean}, {"se", e.ground_truth->standard_error}};
  }
  print(j);
  if (!rec.ok) std::cerr << "stage '" << rec.failed_stage << "' failed: " << rec.error << '\n';
  return rec.ok ? kExitOk : kExitStage;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + tok + "'");
    }
  }
  return out;
}

std::vector<bool> parse_bools(const std::string& s) {
  std::vector<bool> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok == "true" || tok == "1") {
      out.push_back(true);
    } else if (tok == "false" || tok == "0") {
      out.push_back(false);
    } else {
      throw ConfigError("not a boolean: '" + tok + "'");
    }
  }
  return out;
}

/// "short_term" or "long_term:C".
std::vector<reward::RewardSpec> parse_rewards(const std::string& s) {
  std::vector<reward::RewardSpec> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    reward::RewardSpec r;
    const auto colon = tok.find(':');
    r.kind = reward::reward_kind_from_string(tok.substr(0, colon));
    if (colon != std::string::npos) r.c = parse_doubles(tok.substr(colon + 1)).at(0);
    out.push_back(r);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline deep RL for hypotension management: simulate, train, evaluate, compare"};
  app.set_version_flag("--version", harness::kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  fs::path out = default_out();
  app.add_option("--out", out, std::string("Output root (default $") + harness::kOutputEnv + " or ./hemorl_out)");

  ConfigFlags flags;

  auto* simulate = app.add_subcommand("simulate", "Simulate a cohort and write events.jsonl + static.csv to --out");
  flags.add_to(*simulate);

  std::string ingest_events, ingest_static;
  auto* ingest = app.add_subcommand("ingest", "Validate an events.jsonl + static.csv pair");
  ingest->add_option("events", ingest_events, "events.jsonl")->required()->check(CLI::ExistingFile);
  ingest->add_option("static", ingest_static, "static.csv")->required()->check(CLI::ExistingFile);

  struct StageCommand {
    const char* name;
    const char* help;
    harness::Stage until;
    CLI::App* app = nullptr;
  };
  std::vector<StageCommand> stage_commands = {
      {"discretize", "Bin, split and scale the cohort", harness::Stage::dataset},
      {"embed", "Train the recurrent autoencoder and embed every episode", harness::Stage::embed},
      {"train-reward", "Fit the mortality model used by the short-term reward", harness::Stage::mortality},
      {"train-agent", "Train one agent per seed (plus the behaviour model)", harness::Stage::agent},
      {"evaluate", "Run the full pipeline and write the run record", harness::Stage::evaluate},
  };
  for (auto& sc : stage_commands) {
    sc.app = app.add_subcommand(sc.name, sc.help);
    flags.add_to(*sc.app);
  }

  std::string axis_bins, axis_history, axis_embedding, axis_rewards;
  std::size_t max_cells = 64;
  auto* grid = app.add_subcommand("grid", "Run the sensitivity grid and write the report");
  flags.add_to(*grid);
  grid->add_option("--axis-bin-hours", axis_bins, "Comma list, default 1,4");
  grid->add_option("--axis-history", axis_history, "Comma list, default true,false");
  grid->add_option("--axis-embedding", axis_embedding, "Comma list, default lstm,gru");
  grid->add_option("--axis-reward", axis_rewards,
                   "Comma list of short_term or long_term:C, default short_term,long_term:1,long_term:10,long_term:100");
  grid->add_option("--max-cells", max_cells, "Refuse grids larger than this");

  auto* report = app.add_subcommand("report", "Rebuild the report from every run record under --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*ingest) {
      const auto res = cohort::ingest_events(ingest_events, ingest_static);
      std::size_t n_events = 0;
      for (const auto& log : res.logs) n_events += log.events.size();
      print({{"patients", res.logs.size()}, {"events", n_events}, {"warnings", res.warnings}});
      return kExitOk;
    }
    if (*report) {
      const auto records = harness::load_records(out);
      if (records.empty()) {
        std::cerr << "no run records under " << out << '\n';
        return kExitStage;
      }
      const auto files = harness::write_report(records, out / "report");
      json j = json::array();
      for (const auto& f : files) j.push_back(f.string());
      print({{"records", records.size()}, {"files", j}});
      return kExitOk;
    }

    const auto cfg = flags.resolve();
    if (flags.show_config) {
      print(harness::to_json(cfg));
      return kExitOk;
    }

    if (*simulate) {
      if (cfg.source.kind != harness::SourceKind::simulate) throw ConfigError("simulate needs a simulator source");
      fs::create_directories(out);
      const auto logs = cohort::simulate_cohort(cfg.source.sim, cfg.threads);
      cohort::write_events_jsonl(logs, out / "events.jsonl");
      cohort::write_static_csv(logs, out / "static.csv");
      print({{"patients", logs.size()},
             {"events", (out / "events.jsonl").string()},
             {"static", (out / "static.csv").string()}});
      return kExitOk;
    }

    for (const auto& sc : stage_commands) {
      if (*sc.app) return finish(harness::run_experiment(cfg, out, sc.until));
    }

    if (*grid) {
      harness::GridSpec spec;
      spec.base = cfg;
      spec.max_cells = max_cells;
      if (!axis_bins.empty()) spec.bin_hours = parse_doubles(axis_bins);
      if (!axis_history.empty()) spec.include_history = parse_bools(axis_history);
      if (!axis_embedding.empty()) {
        spec.embedding.clear();
        std::stringstream ss(axis_embedding);
        for (std::string tok; std::getline(ss, tok, ',');) spec.embedding.push_back(embed::arch_from_string(tok));
      }
      if (!axis_rewards.empty()) spec.rewards = parse_rewards(axis_rewards);
      const auto result = harness::sensitivity_grid(harness::expand_grid(spec), out);
      json cells = json::array();
      bool all_ok = true;
      for (const auto& r : result.records) {
        cells.push_back({{"label", r.label}, {"config_hash", r.config_hash}, {"ok", r.ok}, {"failed_stage", r.failed_stage}});
        all_ok = all_ok && r.ok;
      }
      print({{"cells", cells}, {"report", result.report_dir.string()}});
      return all_ok ? kExitOk : kExitStage;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitConfig;
}
