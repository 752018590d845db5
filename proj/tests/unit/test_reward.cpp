#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "hemorl/errors.hpp"
#include "hemorl/reward/reward.hpp"

using namespace hemorl;
using namespace hemorl::reward;
using nn::Tensor;

namespace {

double sigma(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Pairwise oracle: P(score_pos > score_neg) + 0.5 P(tie).
double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return num / den;
}

struct Toy {
  Tensor x;
  std::vector<int> y;
};

// Label = 1 iff x0 + 0.5 x1 > 0.6, with a margin band removed.
Toy separable(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0, 1);
  Toy t{Tensor::matrix(n, 4), {}};
  for (std::size_t i = 0; i < n; ++i) {
    double s;
    do {
      for (std::size_t j = 0; j < 4; ++j) t.x.at(i, j) = n01(rng);
      s = t.x.at(i, 0) + 0.5 * t.x.at(i, 1) - 0.6;
    } while (std::abs(s) < 0.1);
    t.y.push_back(s > 0 ? 1 : 0);
  }
  return t;
}

discretize::Episode episode_with(std::size_t n, cohort::Outcome o) {
  discretize::Episode ep;
  ep.patient_id = "e";
  ep.actions.assign(n, 0);
  ep.outcome = o;
  return ep;
}

}  // namespace

TEST(ShortTermReward, Examples) {
  EXPECT_EQ(short_term_reward(0.5, 0.5), 0.0);
  EXPECT_NEAR(short_term_reward(0.5, sigma(-1.0)), 1.0, 1e-12);
  EXPECT_NEAR(short_term_reward(0.5, 0.26894), 1.0, 1e-4);
  EXPECT_EQ(short_term_reward(0.9, 0.9), 0.0);
}

TEST(ShortTermReward, SaturatedProbabilitiesAreClampedAndFlagged) {
  bool flagged = false;
  const double r = short_term_reward(1.0, 0.0, &flagged);
  EXPECT_TRUE(flagged);
  EXPECT_TRUE(std::isfinite(r));
  EXPECT_NEAR(r, 2.0 * std::log((1 - 1e-6) / 1e-6), 1e-6);
  flagged = false;
  short_term_reward(0.3, 0.7, &flagged);
  EXPECT_FALSE(flagged);
  EXPECT_THROW(short_term_reward(1.2, 0.5), DataError);
  EXPECT_THROW(short_term_reward(std::nan(""), 0.5), DataError);
}

TEST(ShortTermReward, TelescopesOverAnEpisode) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(1 + trial % 40);
    for (auto& x : p) x = u(rng);
    const auto r = short_term_rewards(p);
    ASSERT_EQ(r.size(), p.size());
    EXPECT_EQ(r.back(), 0.0);
    double sum = 0;
    for (double x : r) sum += x;
    const double expect = std::log(p.front() / (1 - p.front())) - std::log(p.back() / (1 - p.back()));
    EXPECT_NEAR(sum, expect, 1e-9);
  }
  const std::vector<double> flat(7, 0.37);
  for (double x : short_term_rewards(flat)) EXPECT_EQ(x, 0.0);
}

TEST(LongTermUtility, Examples) {
  EXPECT_EQ(long_term_utility(24, 24, 9000, 1), 0.0);
  EXPECT_EQ(long_term_utility(24, 3, 0, 10), 0.0);
  EXPECT_NEAR(long_term_utility(24, 4, 8760, 1), 3.044522437723423, 1e-12);
  EXPECT_NEAR(long_term_utility(24, 4, 8760, 1), std::log(21.0), 1e-15);
  EXPECT_NEAR(long_term_utility(24, 0, 4380, 100), std::log(1.5), 1e-15);
  EXPECT_THROW(long_term_utility(24, 25, 9000, 1), DataError);
  EXPECT_THROW(long_term_utility(24, 2, 9000, 0), ConfigError);
}

TEST(LongTermUtility, MonotoneInItsArguments) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> hours(0, 20000), cs(0.5, 200);
  std::uniform_int_distribution<int> sofa(0, 23);
  for (int i = 0; i < 2000; ++i) {
    const double h = hours(rng), c = cs(rng);
    const int y = sofa(rng);
    const double u = long_term_utility(24, y, h, c);
    EXPECT_LE(long_term_utility(24, y + 1, h, c), u);
    EXPECT_GE(long_term_utility(24, y, h + 10.0, c), u);
    if (h >= 8760) EXPECT_LE(long_term_utility(24, y, h, c * 1.5), u);
  }
}

TEST(LongTermRewards, TerminalOnly) {
  const auto ep = episode_with(6, {9000, 1, 4});
  RewardSpec spec{RewardKind::long_term, 1.0};
  const auto r = long_term_rewards(ep, spec);
  ASSERT_EQ(r.size(), 6u);
  for (std::size_t t = 0; t + 1 < r.size(); ++t) EXPECT_EQ(r[t], 0.0);
  EXPECT_NEAR(r.back(), std::log(21.0), 1e-15);
  EXPECT_THROW(long_term_rewards(episode_with(3, {-1, 0, 0}), spec), DataError);
}

TEST(RocAuc, MatchesPairwiseOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> coarse(0, 5);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 40; ++i) {
      s.push_back(coarse(rng) * 0.5);
      y.push_back(coin(rng));
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(roc_auc(s, y), auc_oracle(s, y), 1e-12);
  }
  EXPECT_THROW(roc_auc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), DataError);
}

TEST(MortModel, SeparableToyReachesHighAuc) {
  const auto tr = separable(600, 1);
  const auto va = separable(200, 2);
  MortConfig cfg;
  cfg.batch_size = 64;
  cfg.max_epochs = 60;
  const auto res = train_mortality_model(tr.x, tr.y, va.x, va.y, cfg);
  EXPECT_GT(res.val_auc, 0.95);
  for (double p : res.model.probabilities(va.x)) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(MortModel, SameSeedSameModel) {
  const auto tr = separable(100, 3);
  MortConfig cfg;
  cfg.max_epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 7;
  const auto a = train_mortality_model(tr.x, tr.y, Tensor::matrix(0, 4), {}, cfg);
  const auto b = train_mortality_model(tr.x, tr.y, Tensor::matrix(0, 4), {}, cfg);
  const auto pa = a.model.net().parameters();
  const auto pb = b.model.net().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
}

TEST(MortModel, StrongerL1ShrinksWeightsTowardBaseRate) {
  const auto tr = separable(400, 4);
  double base = 0;
  for (int y : tr.y) base += y;
  base /= static_cast<double>(tr.y.size());
  double prev = std::numeric_limits<double>::infinity();
  MortModel last(4, 0);
  for (double lambda : {0.0, 1e-3, 1e-2, 1e-1, 1.0}) {
    MortConfig cfg;
    cfg.l1 = lambda;
    cfg.lr = 1e-2;
    cfg.max_epochs = 100;
    cfg.patience = 1000;
    cfg.batch_size = 64;
    auto res = train_mortality_model(tr.x, tr.y, Tensor::matrix(0, 4), {}, cfg);
    const double norm = nn::l1_norm(res.model.net().weights());
    EXPECT_LT(norm, prev) << "lambda " << lambda;
    prev = norm;
    last = res.model;
  }
  for (double p : last.probabilities(tr.x)) EXPECT_NEAR(p, base, 0.05);
}

TEST(MortModel, SingleClassIsAnError) {
  Tensor x = Tensor::matrix(5, 2, 1.0);
  EXPECT_THROW(train_mortality_model(x, {0, 0, 0, 0, 0}, Tensor::matrix(0, 2), {}, MortConfig{}), DataError);
}

TEST(MortModel, CheckpointRoundTrip) {
  MortModel m(6, 9);
  const auto path = std::filesystem::temp_directory_path() / "hemorl_mort.json";
  m.save(path, {{"embed", "abc"}});
  const auto back = MortModel::load(path);
  const std::vector<double> s = {0.1, -0.2, 0.3, 0.4, -0.5, 0.6};
  EXPECT_EQ(back.logit(s), m.logit(s));
}

TEST(MortalityLabel, ThirtyDaysFromAdmission) {
  EXPECT_EQ(mortality_label({719.9, 0, 3}), 1);
  EXPECT_EQ(mortality_label({720.0, 0, 3}), 0);
  EXPECT_EQ(mortality_label({9000, 1, 3}), 0);
}

TEST(AttachRewards, ShortTermNeedsModels) {
  const auto ep = episode_with(3, {9000, 1, 4});
  EXPECT_THROW(attach_rewards({&ep}, RewardSpec{}), ConfigError);
  MortModel m(2, 1);
  std::vector<Tensor> emb = {Tensor::matrix(3, 2, 0.5)};
  const auto table = attach_rewards({&ep}, RewardSpec{}, &emb, &m);
  ASSERT_EQ(table.rewards.size(), 1u);
  for (double r : table.rewards[0]) EXPECT_EQ(r, 0.0);  // identical states
}
