#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "hemorl/cohort/cohort.hpp"
#include "hemorl/errors.hpp"
#include "hemorl/util.hpp"

namespace fs = std::filesystem;
using namespace hemorl;
using namespace hemorl::cohort;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("hemorl_cohort_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::vector<double> survival_reward(const EventLog& log) { return {static_cast<double>(log.outcome.survived_1yr)}; }

SimParams small(std::size_t n, std::uint64_t seed) {
  SimParams p;
  p.n_patients = n;
  p.seed = seed;
  return p;
}

}  // namespace

TEST(SimParams, RejectsNegativeGainsAndMissingCoreChannels) {
  SimParams p;
  p.vaso_toxicity_gain = -0.1;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SimParams{};
  p.n_patients = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SimParams{};
  p.channels.erase(p.channels.begin());  // drops map
  EXPECT_THROW(p.validate(), ConfigError);
  p = SimParams{};
  p.channels.push_back({"map", 1.0});
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_NO_THROW(SimParams{}.validate());
}

TEST(Simulate, SameSeedGivesByteIdenticalLogs) {
  const auto dir = scratch_dir("determinism");
  const auto p = small(60, 7);
  write_events_jsonl(simulate_cohort(p, 1), dir / "a.jsonl");
  write_events_jsonl(simulate_cohort(p, 4), dir / "b.jsonl");
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
  EXPECT_EQ(sha256_file(dir / "a.jsonl"), sha256_file(dir / "b.jsonl"));
}

TEST(Simulate, DifferentSeedsDiffer) {
  EXPECT_NE(simulate_cohort(small(5, 7)), simulate_cohort(small(5, 8)));
}

TEST(Simulate, PatientDoesNotDependOnCohortSize) {
  const auto a = simulate_cohort(small(3, 11));
  const auto b = simulate_cohort(small(10, 11));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Simulate, LogsSatisfySchemaInvariants) {
  const auto logs = simulate_cohort(small(300, 3));
  for (const auto& log : logs) {
    EXPECT_NO_THROW(log.outcome.validate());
    EXPECT_EQ(log.outcome.survived_1yr, log.outcome.hours_survived >= 24.0 * 365.0 ? 1 : 0);
    EXPECT_LE(log.outcome.final_sofa, 24);
    std::map<std::string, int> counts;
    double prev = 0.0;
    for (const auto& e : log.events) {
      EXPECT_GE(e.time, prev);
      prev = e.time;
      EXPECT_GE(e.time, 0.0);
      EXPECT_LE(e.time, log.icu_end());
      EXPECT_NE(e.kind, EventKind::outcome);
      if (e.kind == EventKind::treatment) {
        EXPECT_TRUE(e.name == kIvFluid || e.name == kVasopressor);
        EXPECT_GE(e.value, 0.0);
      }
      ++counts[e.name];
    }
    for (const char* core : {"map", "lactate", "sofa"}) EXPECT_GE(counts[core], 1) << log.patient_id << " " << core;
  }
}

TEST(Simulate, CohortHasDeathsSurvivorsAndTreatment) {
  const auto logs = simulate_cohort(small(400, 5));
  int died_icu = 0, survived = 0, treated = 0;
  for (const auto& log : logs) {
    died_icu += log.outcome.hours_survived < kIcuHours;
    survived += log.outcome.survived_1yr;
    for (const auto& e : log.events) {
      if (e.kind == EventKind::treatment && e.value > 0.0) {
        ++treated;
        break;
      }
    }
  }
  EXPECT_GT(died_icu, 20);
  EXPECT_GT(survived, 100);
  EXPECT_GT(treated, 100);
}

TEST(Simulate, JsonlRoundTripsThroughIngest) {
  const auto dir = scratch_dir("roundtrip");
  const auto logs = simulate_cohort(small(25, 9));
  write_events_jsonl(logs, dir / "events.jsonl");
  write_static_csv(logs, dir / "static.csv");
  const auto in = ingest_events(dir / "events.jsonl", dir / "static.csv");
  EXPECT_TRUE(in.warnings.empty());
  ASSERT_EQ(in.logs.size(), logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) EXPECT_EQ(in.logs[i], logs[i]);
}

// Monte Carlo oracles, 2000 fresh rollouts each.

TEST(SimulatorMonteCarlo, NoToxicityMaxVasopressorAtLeastNeverTreat) {
  SimParams p = small(1, 21);
  p.vaso_toxicity_gain = 0.0;
  const auto never = ground_truth_value(ConstantController({0.0, 0.0}), p, 2000, 1.0, survival_reward);
  const auto maxed = ground_truth_value(ConstantController({0.0, p.max_vaso_rate}), p, 2000, 1.0, survival_reward);
  EXPECT_GE(maxed.mean, never.mean);
}

TEST(SimulatorMonteCarlo, HighToxicityMaxVasopressorWorseThanPhysician) {
  SimParams p = small(1, 22);
  p.vaso_toxicity_gain = 0.15;
  const auto phys = ground_truth_value(PhysicianController(p), p, 2000, 1.0, survival_reward);
  const auto maxed = ground_truth_value(ConstantController({0.0, p.max_vaso_rate}), p, 2000, 1.0, survival_reward);
  EXPECT_LT(maxed.mean, phys.mean);
}

TEST(SimulatorMonteCarlo, PhysicianBeatsNeverTreatByTwoStandardErrors) {
  const SimParams p = small(1, 23);
  const auto phys = ground_truth_value(PhysicianController(p), p, 2000, 1.0, survival_reward);
  const auto never = ground_truth_value(ConstantController({0.0, 0.0}), p, 2000, 1.0, survival_reward);
  const double se = std::hypot(phys.standard_error, never.standard_error);
  EXPECT_GT(phys.mean - never.mean, 2.0 * se) << phys.mean << " vs " << never.mean;
}

TEST(SimulatorMonteCarlo, VasopressorRaisesNextHourPressure) {
  // Treat from hour 1 onwards; compare the first MAP reading in (1, 2].
  struct Late final : Controller {
    double vaso;
    explicit Late(double v) : vaso(v) {}
    std::unique_ptr<ControllerSession> open(const EventLog&, std::uint64_t) const override {
      struct S final : ControllerSession {
        double v;
        explicit S(double v_) : v(v_) {}
        double next_candidate(double t) override { return t < 1.0 ? 1.0 : 1e9; }
        std::optional<Rates> decide(double, const EventLog&, const Rates&) override { return Rates{0.0, v}; }
      };
      return std::make_unique<S>(vaso);
    }
  };
  auto mean_map = [](const Controller& c) {
    SimParams p = small(2000, 31);
    const auto logs = simulate_cohort(p, c);
    double sum = 0.0;
    int n = 0;
    for (const auto& log : logs) {
      for (const auto& e : log.events) {
        if (e.name == "map" && e.time > 1.0 && e.time <= 2.0) {
          sum += e.value;
          ++n;
          break;
        }
      }
    }
    return sum / n;
  };
  EXPECT_GT(mean_map(Late(1.0)), mean_map(Late(0.0)) + 5.0);
}

TEST(SimulatorMonteCarlo, CumulativeVasopressorRaisesMortalityWithToxicity) {
  SimParams p = small(1, 41);
  p.vaso_toxicity_gain = 0.05;
  const auto low = ground_truth_value(ConstantController({0.0, 0.3}), p, 2000, 1.0, survival_reward);
  const auto high = ground_truth_value(ConstantController({0.0, 1.2}), p, 2000, 1.0, survival_reward);
  EXPECT_LT(high.mean, low.mean);
}

TEST(GroundTruth, GammaZeroUnitFirstRewardIsExactlyOne) {
  const auto p = small(1, 2);
  auto first_only = [](const EventLog&) { return std::vector<double>{1.0, 5.0, 7.0}; };
  const auto v = ground_truth_value(PhysicianController(p), p, 50, 0.0, first_only);
  EXPECT_EQ(v.mean, 1.0);
  EXPECT_EQ(v.standard_error, 0.0);
  EXPECT_EQ(v.n, 50u);
}

TEST(GroundTruth, SameSeedSameValue) {
  const auto p = small(1, 4);
  const auto a = ground_truth_value(PhysicianController(p), p, 200, 0.99, survival_reward, 1);
  const auto b = ground_truth_value(PhysicianController(p), p, 200, 0.99, survival_reward, 3);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.standard_error, b.standard_error);
}

TEST(GroundTruth, RolloutsAreDisjointFromCohortStream) {
  const auto p = small(1, 4);
  const auto before = simulation_calls();
  ground_truth_value(PhysicianController(p), p, 10, 1.0, survival_reward);
  EXPECT_EQ(simulation_calls() - before, 10u);
}

TEST(GroundTruth, InvalidActionIndexIsAnError) {
  struct Bad final : BinPolicy {
    int act(const EventLog&, double, double) override { return 25; }
  };
  ActionRates rates;
  GridController grid(4.0, rates, [](const EventLog&, std::uint64_t) { return std::make_unique<Bad>(); });
  const auto p = small(1, 5);
  try {
    ground_truth_value(grid, p, 4, 1.0, survival_reward, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("invalid action index 25"), std::string::npos);
  }
}

TEST(GroundTruth, GridControllerActsAtBinEnds) {
  struct Record final : BinPolicy {
    std::vector<double>* ends;
    explicit Record(std::vector<double>* e) : ends(e) {}
    int act(const EventLog&, double start, double end) override {
      EXPECT_DOUBLE_EQ(end - start, 4.0);
      ends->push_back(end);
      return 24;
    }
  };
  std::vector<double> ends;
  ActionRates rates{{0, 1, 2, 3, 4}, {0, 0.1, 0.2, 0.3, 0.4}};
  GridController grid(4.0, rates, [&](const EventLog&, std::uint64_t) { return std::make_unique<Record>(&ends); });
  SimParams p = small(1, 6);
  p.baseline_hazard = 0.0;
  const auto log = simulate_patient(p, 0, grid, 6);
  ASSERT_EQ(ends.size(), 17u);  // 4, 8, ..., 68
  EXPECT_DOUBLE_EQ(ends.front(), 4.0);
  EXPECT_DOUBLE_EQ(ends.back(), 68.0);
  int treatments = 0;
  for (const auto& e : log.events) {
    if (e.kind != EventKind::treatment) continue;
    ++treatments;
    EXPECT_DOUBLE_EQ(e.time, 4.0);
    EXPECT_DOUBLE_EQ(e.value, e.name == kIvFluid ? 4.0 : 0.4);
  }
  EXPECT_EQ(treatments, 2);
}

TEST(ActionRatesTest, IndexSplitsIntoIvAndVasopressorBins) {
  ActionRates r{{0, 10, 20, 30, 40}, {0, 1, 2, 3, 4}};
  EXPECT_EQ(r.rates_for(0), (Rates{0, 0}));
  EXPECT_EQ(r.rates_for(7), (Rates{10, 2}));
  EXPECT_EQ(r.rates_for(24), (Rates{40, 4}));
  EXPECT_THROW(r.rates_for(-1), DataError);
}

// Ingest fixtures.

namespace {

const char* kStatic = "patient_id,age,weight,elixhauser\nA,60,70,3\nB,71,82.5,5\n";

std::string outcome_lines(const std::string& pid, double h, int s, int y) {
  auto rec = [&](const char* name, double v) {
    return "{\"patient_id\":\"" + pid + "\",\"time\":" + std::to_string(std::min(h, 72.0)) +
           ",\"kind\":\"outcome\",\"name\":\"" + name + "\",\"value\":" + std::to_string(v) + "}\n";
  };
  return rec("hours_survived", h) + rec("survived_1yr", s) + rec("final_sofa", y);
}

std::string meas(const std::string& pid, double t, const char* name, double v) {
  return "{\"patient_id\":\"" + pid + "\",\"time\":" + std::to_string(t) + ",\"kind\":\"measurement\",\"name\":\"" +
         name + "\",\"value\":" + std::to_string(v) + "}\n";
}

}  // namespace

TEST(Ingest, WellFormedTwoPatientFixture) {
  const auto dir = scratch_dir("ok");
  write_text(dir / "static.csv", kStatic);
  write_text(dir / "events.jsonl", meas("A", 0, "map", 70) + meas("A", 1.5, "lactate", 2.1) +
                                       "{\"patient_id\":\"A\",\"time\":2,\"kind\":\"treatment\",\"name\":"
                                       "\"vasopressor_rate\",\"value\":0.2}\n" +
                                       outcome_lines("A", 9000, 1, 3) + meas("B", 0, "map", 60) +
                                       outcome_lines("B", 30, 0, 14));
  const auto r = ingest_events(dir / "events.jsonl", dir / "static.csv");
  ASSERT_EQ(r.logs.size(), 2u);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_EQ(r.logs[0].patient_id, "A");
  EXPECT_EQ(r.logs[0].events.size(), 3u);
  EXPECT_EQ(r.logs[0].outcome, (Outcome{9000, 1, 3}));
  EXPECT_DOUBLE_EQ(r.logs[1].statics.weight, 82.5);
  EXPECT_DOUBLE_EQ(r.logs[1].icu_end(), 30.0);
}

TEST(Ingest, NegativeTimeRejectedWithLineNumber) {
  const auto dir = scratch_dir("neg");
  write_text(dir / "static.csv", kStatic);
  write_text(dir / "events.jsonl", meas("A", 0, "map", 70) + meas("A", -1, "map", 71) + outcome_lines("A", 9000, 1, 3));
  try {
    ingest_events(dir / "events.jsonl", dir / "static.csv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("events.jsonl:2:"), std::string::npos) << e.what();
  }
}

TEST(Ingest, UnsortedTimesAreSortedWithWarning) {
  const auto dir = scratch_dir("unsorted");
  write_text(dir / "static.csv", "patient_id,age,weight,elixhauser\nA,60,70,3\n");
  write_text(dir / "events.jsonl",
             meas("A", 5, "map", 70) + meas("A", 1, "map", 72) + meas("A", 3, "map", 71) + outcome_lines("A", 9000, 1, 3));
  const auto r = ingest_events(dir / "events.jsonl", dir / "static.csv");
  ASSERT_EQ(r.warnings.size(), 1u);
  const auto& ev = r.logs.at(0).events;
  ASSERT_EQ(ev.size(), 3u);
  EXPECT_EQ(ev[0].time, 1.0);
  EXPECT_EQ(ev[1].time, 3.0);
  EXPECT_EQ(ev[2].time, 5.0);
}

TEST(Ingest, RejectsDuplicatesAndSchemaViolations) {
  const auto dir = scratch_dir("bad");
  write_text(dir / "static.csv", kStatic);
  auto expect_error = [&](const std::string& events, const std::string& fragment) {
    write_text(dir / "events.jsonl", events);
    try {
      ingest_events(dir / "events.jsonl", dir / "static.csv");
      ADD_FAILURE() << "expected DataError containing " << fragment;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  const auto tail = outcome_lines("A", 9000, 1, 3) + outcome_lines("B", 9000, 1, 3);
  expect_error(meas("A", 1, "map", 70) + meas("A", 1, "map", 70) + tail, "events.jsonl:2: duplicate");
  expect_error(meas("A", 73, "map", 70) + tail, "outside [0, 72]");
  expect_error(meas("C", 1, "map", 70) + tail, "not in static.csv");
  expect_error("{\"patient_id\":\"A\",\"time\":1}\n" + tail, "events.jsonl:1: missing field");
  expect_error("not json\n" + tail, "events.jsonl:1: malformed JSON");
  expect_error(meas("A", 1, "map", 70) + outcome_lines("A", 9000, 1, 3), "'B' lacks a complete outcome");
  expect_error(meas("A", 1, "map", 70) + outcome_lines("A", 9000, 0, 3) + outcome_lines("B", 9000, 1, 3),
               "survived_1yr must equal");
  expect_error(meas("A", 40, "map", 70) + outcome_lines("A", 30, 0, 3) + outcome_lines("B", 9000, 1, 3),
               "after hours_survived");
  expect_error("{\"patient_id\":\"A\",\"time\":1,\"kind\":\"treatment\",\"name\":\"vasopressor_rate\",\"value\":-1}\n" +
                   tail,
               "negative treatment rate");
  expect_error("{\"patient_id\":\"A\",\"time\":1,\"kind\":\"dose\",\"name\":\"x\",\"value\":1}\n" + tail,
               "unknown event kind");
}
