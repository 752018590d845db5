#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hemorl/errors.hpp"
#include "hemorl/harness/harness.hpp"
#include "hemorl/util.hpp"

using namespace hemorl;
using namespace hemorl::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.source.sim.n_patients = 40;
  c.source.sim.seed = 3;
  c.bin_hours = 4.0;
  c.seeds = {0, 1};
  c.embed.hidden = 8;
  c.embed.max_epochs = 2;
  c.mort.max_epochs = 3;
  c.behavior.max_epochs = 2;
  c.behavior.hidden = 8;
  c.agent.hidden = 8;
  c.agent.steps = 200;
  c.agent.batch_size = 16;
  c.agent.target_sync = 50;
  c.agent.log_every = 100;
  c.n_boot = 50;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hemorl_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream f(p);
  std::size_t n = 0;
  for (std::string line; std::getline(f, line);) ++n;
  return n;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(HarnessConfig, HashIgnoresSeedOrderAndThreads) {
  auto a = tiny(), b = tiny();
  b.seeds = {1, 0};
  b.threads = 4;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.agent.lr = 2e-4;
  EXPECT_NE(config_hash(a), config_hash(b));
  auto c = tiny();
  c.reward.kind = reward::RewardKind::long_term;
  EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(HarnessConfig, JsonRoundTripKeepsTheHash) {
  auto a = tiny();
  a.reward = {reward::RewardKind::long_term, 100.0, 24};
  a.embedding = embed::Arch::gru;
  a.include_history = false;
  const auto b = config_from_json(nlohmann::json::parse(to_json(a).dump()));
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(b.label(), "4h-nohist-gru-long-c100");
  EXPECT_EQ(tiny().label(), "4h-hist-lstm-short");
}

TEST(HarnessConfig, PartialJsonTakesDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"bin_hours": 4, "agent": {"steps": 10}})"));
  EXPECT_EQ(c.bin_hours, 4.0);
  EXPECT_EQ(c.agent.steps, 10u);
  EXPECT_EQ(c.agent.lr, agent::TrainConfig{}.lr);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"source": {"kind": "s3"}})")), ConfigError);
}

TEST(HarnessConfig, ValidationRejectsBadAxes) {
  auto c = tiny();
  c.seeds = {1, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.bin_hours = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.source.kind = SourceKind::ingest;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(desk_config().validate());
}

TEST(HarnessConfig, DeskProfile) {
  const auto c = desk_config();
  EXPECT_EQ(c.source.sim.n_patients, 200u);
  EXPECT_EQ(c.agent.hidden, 32u);
  EXPECT_EQ(c.embed.hidden, 32u);
  EXPECT_EQ(c.agent.steps, 20000u);
  EXPECT_EQ(c.label(), "1h-hist-lstm-short");
}

TEST(HarnessGrid, ExpandsTheCartesianProduct) {
  GridSpec g;
  g.base = tiny();
  g.bin_hours = {4.0};
  g.rewards = {reward::RewardSpec{}};
  const auto cells = expand_grid(g);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].label(), "4h-hist-lstm-short");
  EXPECT_EQ(cells[3].label(), "4h-nohist-gru-short");

  GridSpec full;
  EXPECT_EQ(expand_grid(full).size(), 32u);
  full.max_cells = 10;
  EXPECT_THROW(expand_grid(full), ConfigError);
}

// ---------------------------------------------------------------- runs

TEST(HarnessRun, RunsThenReusesTheCache) {
  const auto out = fresh_dir("run");
  const auto cfg = tiny();
  const auto first = run_experiment(cfg, out);
  ASSERT_TRUE(first.ok) << first.failed_stage << ": " << first.error;
  ASSERT_TRUE(first.eval);
  EXPECT_EQ(first.snapshot_ids.size(), 2u);
  EXPECT_EQ(first.eval->seeds.size(), 2u);
  EXPECT_LT(first.eval->selected, 2u);
  EXPECT_EQ(first.eval->method, ope::SelectMethod::wdr);
  EXPECT_FALSE(first.stages_run.empty());
  EXPECT_TRUE(fs::exists(out / "runs" / first.config_hash / "record.json"));
  EXPECT_EQ(count_lines(out / "results.jsonl"), 2u);
  const auto line = nlohmann::json::parse(read_file(out / "results.jsonl").substr(0, read_file(out / "results.jsonl").find('\n')));
  for (const char* k : {"snapshot_id", "method", "value", "ess", "diagnostics"}) EXPECT_TRUE(line.contains(k)) << k;

  const auto sims = cohort::simulation_calls();
  const auto again = run_experiment(cfg, out);
  EXPECT_TRUE(again.stages_run.empty());
  EXPECT_EQ(cohort::simulation_calls(), sims);
  EXPECT_EQ(again.snapshot_ids, first.snapshot_ids);
  EXPECT_EQ(to_json(*again.eval).dump(), to_json(*first.eval).dump());
  EXPECT_EQ(count_lines(out / "results.jsonl"), 4u);
}

TEST(HarnessRun, LongTermRewardSelectsByQ) {
  const auto out = fresh_dir("long");
  auto cfg = tiny();
  cfg.reward = {reward::RewardKind::long_term, 10.0, 24};
  const auto r = run_experiment(cfg, out);
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_EQ(r.eval->method, ope::SelectMethod::mean_q);
  for (std::size_t i = 0; i < r.eval->seeds.size(); ++i) {
    EXPECT_EQ(r.eval->seeds[i].selection_value, r.eval->seeds[i].mean_q);
  }
}

TEST(HarnessRun, StageFailureIsRecorded) {
  const auto out = fresh_dir("fail");
  auto cfg = tiny();
  cfg.agent.divergence_loss = 1e-12;
  const auto r = run_experiment(cfg, out);
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.failed_stage, "agent");
  EXPECT_FALSE(r.error.empty());
  EXPECT_TRUE(fs::exists(out / "runs" / r.config_hash / "record.json"));
  // Earlier stages stay cached for the next attempt.
  EXPECT_TRUE(fs::exists(out / "cache" / "embed"));
}

TEST(HarnessRun, GroundTruthRolloutsUseTheLearnedPolicy) {
  const auto out = fresh_dir("gt");
  auto cfg = tiny();
  cfg.seeds = {0};
  cfg.ground_truth_rollouts = 20;
  const auto r = run_experiment(cfg, out);
  ASSERT_TRUE(r.ok) << r.error;
  ASSERT_TRUE(r.eval->ground_truth);
  EXPECT_EQ(r.eval->ground_truth->n, 20u);
  EXPECT_TRUE(std::isfinite(r.eval->ground_truth->mean));
  EXPECT_GT(r.eval->ground_truth->standard_error, 0.0);
  EXPECT_TRUE(std::isfinite(r.eval->selected_wdr));
  EXPECT_TRUE(std::isnan(r.eval->max_cv));  // one restart
}

// ---------------------------------------------------------------- grid and report

TEST(HarnessGrid, OneFailingCellDoesNotStopTheOthers) {
  const auto out = fresh_dir("grid");
  GridSpec g;
  g.base = tiny();
  g.bin_hours = {4.0};
  g.embedding = {embed::Arch::lstm};
  g.rewards = {reward::RewardSpec{}};
  auto cells = expand_grid(g);  // history x 1: two cells
  ASSERT_EQ(cells.size(), 2u);
  auto broken = cells[0];
  broken.embedding = embed::Arch::gru;
  broken.agent.divergence_loss = 1e-12;
  cells.push_back(broken);

  const auto res = sensitivity_grid(cells, out);
  ASSERT_EQ(res.records.size(), 3u);
  EXPECT_TRUE(res.records[0].ok);
  EXPECT_TRUE(res.records[1].ok);
  EXPECT_FALSE(res.records[2].ok);

  const auto manifest = nlohmann::json::parse(read_file(out / "manifest.json"));
  ASSERT_EQ(manifest.at("cells").size(), 3u);
  EXPECT_FALSE(manifest.at("cells")[2].at("ok").get<bool>());
  const std::string md = read_file(res.report_dir / "report.md");
  EXPECT_NE(md.find("FAILED at agent"), std::string::npos);
  EXPECT_NE(md.find("## Treatment history"), std::string::npos);
  EXPECT_TRUE(fs::exists(res.report_dir / "history.csv"));

  // Every CSV parses with a constant field count.
  for (const auto& f : res.files) {
    if (f.extension() != ".csv") continue;
    std::istringstream in(read_file(f));
    std::string line;
    std::getline(in, line);
    const auto width = csv_split(line).size();
    while (std::getline(in, line)) EXPECT_EQ(csv_split(line).size(), width) << f;
  }
  EXPECT_EQ(load_records(out).size(), 3u);
}

TEST(HarnessReport, SingleRecordAndConditionalSections) {
  const auto out = fresh_dir("report");
  auto a = tiny();
  const auto ra = run_experiment(a, out);
  ASSERT_TRUE(ra.ok) << ra.error;
  const auto files = write_report(std::vector<RunRecord>{ra}, out / "single");
  const std::string md = read_file(out / "single" / "report.md");
  EXPECT_NE(md.find("## 4h-hist-lstm-short"), std::string::npos);
  EXPECT_EQ(md.find("## Restart variation by reward horizon"), std::string::npos);
  EXPECT_FALSE(fs::exists(out / "single" / "history.csv"));

  auto b = tiny();
  b.reward = {reward::RewardKind::long_term, 10.0, 24};
  const auto rb = run_experiment(b, out);
  ASSERT_TRUE(rb.ok) << rb.error;
  write_report(std::vector<RunRecord>{ra, rb}, out / "both");
  const std::string md2 = read_file(out / "both" / "report.md");
  EXPECT_NE(md2.find("## Restart variation by reward horizon"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "both" / "reward_sweep.csv"));
  EXPECT_THROW(write_report(std::vector<RunRecord>{}, out / "none"), DataError);
}

TEST(HarnessReport, FreshRerunReproducesTheReportBitwise) {
  const auto o1 = fresh_dir("det1"), o2 = fresh_dir("det2");
  GridSpec g;
  g.base = tiny();
  g.bin_hours = {4.0};
  g.include_history = {true};
  g.embedding = {embed::Arch::lstm, embed::Arch::gru};
  g.rewards = {reward::RewardSpec{}};
  const auto cells = expand_grid(g);
  const auto r1 = sensitivity_grid(cells, o1);
  const auto r2 = sensitivity_grid(cells, o2);
  ASSERT_EQ(r1.files.size(), r2.files.size());
  EXPECT_TRUE(fs::exists(r1.report_dir / "embedding_rr.csv"));
  for (std::size_t i = 0; i < r1.files.size(); ++i) {
    EXPECT_EQ(r1.files[i].filename(), r2.files[i].filename());
    EXPECT_EQ(sha256_file(r1.files[i]), sha256_file(r2.files[i])) << r1.files[i].filename();
  }
}

// ---------------------------------------------------------------- online policy

TEST(HarnessPolicy, UniformEpsilonCoversTheActionSpace) {
  // With epsilon = 1 the learned policy is uniform over the 25 actions.
  const auto out = fresh_dir("policy");
  auto cfg = tiny();
  cfg.seeds = {0};
  ASSERT_TRUE(run_experiment(cfg, out).ok);
  const auto ds_dir = *fs::directory_iterator(out / "cache" / "dataset");
  const auto data = discretize::load_dataset(ds_dir.path());
  const auto em_dir = *fs::directory_iterator(out / "cache" / "embed");
  const auto emb = embed::EmbedModel::load(em_dir.path() / "embed.json", discretize::prep_hash(data.prep));
  const agent::QNetwork q(emb.hidden(), 1, 8, 25);

  std::array<int, 25> seen{};
  auto factory = learned_policy_factory(data.prep, emb, q, 1.0);
  cohort::GridController recorder(4.0, data.prep.binning.action_rates(),
                                  [&](const cohort::EventLog& h, std::uint64_t s) {
                                    struct Rec final : cohort::BinPolicy {
                                      std::unique_ptr<cohort::BinPolicy> inner;
                                      std::array<int, 25>* seen;
                                      int act(const cohort::EventLog& l, double a, double b) override {
                                        const int x = inner->act(l, a, b);
                                        ++(*seen)[x];
                                        return x;
                                      }
                                    };
                                    auto r = std::make_unique<Rec>();
                                    r->inner = factory(h, s);
                                    r->seen = &seen;
                                    return r;
                                  });
  cohort::SimParams p = cfg.source.sim;
  p.n_patients = 60;
  cohort::simulate_cohort(p, recorder, 1);
  int total = 0, nonzero = 0;
  for (int c : seen) total += c, nonzero += c > 0;
  EXPECT_GT(total, 300);
  EXPECT_EQ(nonzero, 25);
}
