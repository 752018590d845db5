#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>

#include "hemorl/agent/agent.hpp"
#include "hemorl/cohort/cohort.hpp"
#include "hemorl/errors.hpp"
#include "hemorl/nnkit/gradcheck.hpp"
#include "hemorl/util.hpp"

using namespace hemorl;
using namespace hemorl::agent;
using nn::Tensor;

namespace {

nn::Parameter& param(QNetwork& net, const std::string& name) {
  for (auto* p : net.parameters()) {
    if (p->name == name) return *p;
  }
  throw std::runtime_error("no parameter " + name);
}

// Head weights zeroed, so Q(s, .) = dueling_combine(vb, ab) for every s.
void set_constant_q(QNetwork& net, double vb, const std::vector<double>& ab) {
  param(net, "q.value.0.dense.W").value.fill(0.0);
  param(net, "q.value.0.dense.b").value.fill(vb);
  param(net, "q.advantage.0.dense.W").value.fill(0.0);
  auto& b = param(net, "q.advantage.0.dense.b").value;
  for (std::size_t i = 0; i < ab.size(); ++i) b[i] = ab[i];
}



std::vector<double> one_hot(std::size_t i, std::size_t n) {
  std::vector<double> v(n, 0.0);
  v[i] = 1.0;
  return v;
}

// Deterministic chain: s0 -a0-> s0 (r 0), s0 -a1-> s1 (r 0.2), s1 -a0-> s0 (r 0), s1 -a1-> s1 (r 0.5).
struct Chain {
  static constexpr double gamma = 0.9;
  static std::size_t next(std::size_t s, std::size_t a) { return a == 0 ? 0 : 1; }
  static double reward(std::size_t s, std::size_t a) { return a == 0 ? 0.0 : (s == 0 ? 0.2 : 0.5); }
};

// Q* by value iteration.
std::array<std::array<double, 2>, 2> chain_q_star() {
  std::array<std::array<double, 2>, 2> q{};
  for (int it = 0; it < 5000; ++it) {
    auto nq = q;
    for (std::size_t s = 0; s < 2; ++s) {
      for (std::size_t a = 0; a < 2; ++a) {
        const auto s2 = Chain::next(s, a);
        nq[s][a] = Chain::reward(s, a) + Chain::gamma * std::max(q[s2][0], q[s2][1]);
      }
    }
    q = nq;
  }
  return q;
}

TrainConfig toy_config(std::uint64_t seed) {
  TrainConfig c;
  c.steps = 20000;
  c.gamma = Chain::gamma;
  c.lr = 1e-3;
  c.target_sync = 250;
  c.num_actions = 2;
  c.seed = seed;
  return c;
}

TransitionSet chain_data() {
  TransitionSet d(2);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t a = 0; a < 2; ++a) {
      d.add(one_hot(s, 2), static_cast<int>(a), Chain::reward(s, a), one_hot(Chain::next(s, a), 2), false);
    }
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------- dueling

TEST(Dueling, ZeroStreamsGiveZeroQ) {
  const auto q = dueling_combine(0.0, std::vector<double>(25, 0.0));
  for (double x : q) EXPECT_EQ(x, 0.0);
}

TEST(Dueling, OneHotAdvantage) {
  std::vector<double> a(25, 0.0);
  a[0] = 1.0;
  const auto q = dueling_combine(1.0, a);
  EXPECT_NEAR(q[0], 1.0 + 24.0 / 25.0, 1e-15);
  for (std::size_t i = 1; i < 25; ++i) EXPECT_NEAR(q[i], 1.0 - 1.0 / 25.0, 1e-15);
}

TEST(Dueling, ShiftInvariantInAEquivariantInV) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(25);
    for (double& x : a) x = n01(rng);
    const double v = n01(rng), c = 10 * n01(rng);
    const auto q = dueling_combine(v, a);
    auto shifted = a;
    for (double& x : shifted) x += c;
    const auto qa = dueling_combine(v, shifted);
    const auto qv = dueling_combine(v + c, a);
    for (std::size_t i = 0; i < 25; ++i) {
      EXPECT_NEAR(qa[i], q[i], 1e-12);
      EXPECT_NEAR(qv[i], q[i] + c, 1e-12);
    }
  }
}

TEST(Dueling, EmptyAdvantageIsAnError) { EXPECT_THROW(dueling_combine(0.0, {}), DimensionError); }

// ---------------------------------------------------------------- network

TEST(QNetwork, ShapesAndWidthCheck) {
  QNetwork net(7, 1);
  EXPECT_EQ(net.num_actions(), 25u);
  EXPECT_EQ(net.q_values(std::vector<double>(7, 0.3)).size(), 25u);
  EXPECT_EQ(net.infer(Tensor::matrix(4, 7)).shape(), (std::vector<std::size_t>{4, 25}));
  EXPECT_THROW(net.q_values(std::vector<double>(6, 0.0)), DimensionError);
  EXPECT_THROW(QNetwork(7, 1, 127), ConfigError);
}

TEST(QNetwork, GradientCheck) {
  QNetwork net(5, 3, 8, 4);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  Tensor x = Tensor::matrix(6, 5);
  for (double& v : x.values()) v = n01(rng);
  Tensor c = Tensor::matrix(6, 4);
  for (double& v : c.values()) v = n01(rng);
  auto loss = [&] {
    const Tensor q = net.forward(x, nn::Mode::train);
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += c[i] * q[i];
    return s;
  };
  auto backprop = [&] {
    net.zero_grad();
    net.forward(x, nn::Mode::train);
    net.backward(c);
  };
  const auto rep = nn::grad_check(net.parameters(), loss, backprop, 1e-6);
  EXPECT_TRUE(rep.pass) << rep.worst_param << " " << rep.max_rel_error << " " << rep.failure;
  EXPECT_GT(rep.checked, 100u);
}

TEST(QNetwork, CheckpointRoundTrip) {
  QNetwork net(6, 9, 16, 25);
  const auto back = QNetwork::from_checkpoint_json(nlohmann::json::parse(net.checkpoint_json().dump()));
  const std::vector<double> s{0.1, -0.2, 0.3, 1.0, 0.0, 2.0};
  EXPECT_EQ(back.q_values(s), net.q_values(s));
}

TEST(Greedy, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax(std::vector<double>(25, 3.0)), 0u);
  std::vector<double> q(25, 0.0);
  q[17] = 1.0;
  EXPECT_EQ(argmax(q), 17u);
  QNetwork net(3, 2);
  set_constant_q(net, 0.0, std::vector<double>(25, 0.0));
  EXPECT_EQ(greedy_action(net, std::vector<double>{1, 2, 3}), 0u);
  auto a = std::vector<double>(25, 0.0);
  a[17] = 1.0;
  set_constant_q(net, 0.0, a);
  EXPECT_EQ(greedy_action(net, std::vector<double>{1, 2, 3}), 17u);
}

TEST(Greedy, EpsilonSoftProbabilities) {
  std::vector<double> q(25, 0.0);
  q[4] = 2.0;
  const auto p = epsilon_soft(q, 0.01);
  for (std::size_t i = 0; i < 25; ++i) {
    if (i == 4) {
      EXPECT_NEAR(p[i], 0.99 + 0.01 / 25, 1e-15);
    } else {
      EXPECT_NEAR(p[i], 0.01 / 25, 1e-18);
    }
  }
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  EXPECT_THROW(epsilon_soft(q, 1.5), ConfigError);
}

// ---------------------------------------------------------------- targets

TEST(Targets, TerminalAndZeroGamma) {
  TransitionSet d(2);
  d.add(std::vector<double>{0, 1}, 0, 2.0, std::vector<double>{1, 0}, true);
  d.add(std::vector<double>{1, 0}, 1, -0.5, std::vector<double>{0, 1}, false);
  QNetwork online(2, 1), target(2, 2);
  const std::vector<std::size_t> ids{0, 1};
  const auto y = ddqn_targets(d, ids, online, target, 0.99);
  EXPECT_EQ(y[0], 2.0);
  const auto y0 = ddqn_targets(d, ids, online, target, 0.0);
  EXPECT_EQ(y0[0], 2.0);
  EXPECT_EQ(y0[1], -0.5);
}

TEST(Targets, DoubleUsesTargetValueAtOnlineArgmax) {
  TransitionSet d(2);
  d.add(std::vector<double>{0, 1}, 0, 1.0, std::vector<double>{1, 1}, false);
  QNetwork online(2, 1, 8, 2), target(2, 2, 8, 2);
  set_constant_q(online, 0.0, {0.0, 1.0});  // online prefers action 1
  set_constant_q(target, 0.0, {5.0, 0.0});  // target: Q = (2.5, -2.5)
  const std::vector<std::size_t> ids{0};
  const double gamma = 0.5;
  EXPECT_NEAR(ddqn_targets(d, ids, online, target, gamma, true)[0], 1.0 + gamma * -2.5, 1e-12);
  EXPECT_NEAR(ddqn_targets(d, ids, online, target, gamma, false)[0], 1.0 + gamma * 2.5, 1e-12);
}

TEST(Targets, EvalModeTargetsAreRepeatable) {
  TransitionSet d(3);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> s{n01(rng), n01(rng), n01(rng)}, s2{n01(rng), n01(rng), n01(rng)};
    d.add(s, i % 25, n01(rng), s2, i % 7 == 0);
  }
  QNetwork online(3, 1), target(3, 2);
  // Run train-mode passes so the batchnorm running statistics are non-trivial.
  std::vector<std::size_t> ids(40);
  std::iota(ids.begin(), ids.end(), 0);
  target.forward(gather_states(d, ids, false), nn::Mode::train);
  online.forward(gather_states(d, ids, false), nn::Mode::train);
  EXPECT_EQ(ddqn_targets(d, ids, online, target, 0.99), ddqn_targets(d, ids, online, target, 0.99));
}

// ---------------------------------------------------------------- sum tree / replay

TEST(SumTree, PrefixSearchMatchesLinearScan) {
  SumTree tree(13);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  std::vector<double> v(13);
  for (std::size_t i = 0; i < 13; ++i) tree.set(i, v[i] = (i == 5 ? 0.0 : u(rng)));
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  EXPECT_NEAR(tree.total(), total, 1e-12);
  std::uniform_real_distribution<double> q(0.0, total);
  for (int k = 0; k < 2000; ++k) {
    const double x = q(rng);
    double acc = 0;
    std::size_t expect = 0;
    for (std::size_t i = 0; i < 13; ++i) {
      if (x < acc + v[i]) {
        expect = i;
        break;
      }
      acc += v[i];
    }
    EXPECT_EQ(tree.find(x), expect);
  }
  EXPECT_NE(tree.find(total), 5u);
  EXPECT_THROW(tree.set(13, 1.0), DataError);
  EXPECT_THROW(SumTree(0), ConfigError);
}

TEST(Replay, EmptyBufferIsAnError) {
  TransitionSet d(2);
  EXPECT_THROW(ReplayBuffer(d, PerConfig{}), DataError);
}

TEST(Replay, EqualPrioritiesSampleUniformly) {
  TransitionSet d(1);
  const std::size_t n = 10;
  for (std::size_t i = 0; i < n; ++i) d.add(std::vector<double>{double(i)}, 0, 0.0, std::vector<double>{0.0}, true);
  ReplayBuffer buf(d, PerConfig{});
  std::mt19937_64 rng(8);
  std::vector<double> count(n, 0.0);
  const std::size_t draws = 100000;
  for (std::size_t k = 0; k < draws / 50; ++k) {
    for (auto id : buf.sample(50, 0.4, rng).ids) count[id] += 1;
  }
  const double e = double(draws) / n;
  const double sd = std::sqrt(draws * (1.0 / n) * (1.0 - 1.0 / n));
  double chi2 = 0;
  for (double c : count) {
    EXPECT_LT(std::abs(c - e), 3 * sd);
    chi2 += (c - e) * (c - e) / e;
  }
  EXPECT_LT(chi2, 27.88);  // 0.999 quantile, 9 degrees of freedom
}

TEST(Replay, AlphaZeroIgnoresPriorities) {
  TransitionSet d(1);
  for (int i = 0; i < 6; ++i) d.add(std::vector<double>{0.0}, 0, 0.0, std::vector<double>{0.0}, true);
  PerConfig cfg;
  cfg.alpha = 0.0;
  ReplayBuffer buf(d, cfg);
  const std::vector<std::size_t> ids{0, 1, 2};
  buf.update(ids, std::vector<double>{100.0, 0.0, 3.0});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(buf.probability(i), 1.0 / 6.0, 1e-15);
}

TEST(Replay, DominantPriorityDominatesSamples) {
  TransitionSet d(1);
  for (int i = 0; i < 20; ++i) d.add(std::vector<double>{0.0}, 0, 0.0, std::vector<double>{0.0}, true);
  ReplayBuffer buf(d, PerConfig{});
  std::vector<std::size_t> ids(20);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<double> td(20, 0.0);
  td[7] = 1e4;
  buf.update(ids, td);
  std::mt19937_64 rng(1);
  std::size_t hits = 0, total = 0;
  for (int k = 0; k < 200; ++k) {
    for (auto id : buf.sample(30, 1.0, rng).ids) hits += id == 7, ++total;
  }
  // P(7) = (1e4 + .01)^.6 / ((1e4 + .01)^.6 + 19 * .01^.6), about 0.9998.
  EXPECT_GT(double(hits) / total, 0.99);
}

TEST(Replay, UpdateSetsPriorityAndKeepsTotalExact) {
  TransitionSet d(1);
  for (int i = 0; i < 50; ++i) d.add(std::vector<double>{0.0}, 0, 0.0, std::vector<double>{0.0}, true);
  PerConfig cfg;
  ReplayBuffer buf(d, cfg);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (int round = 0; round < 500; ++round) {
    const std::vector<std::size_t> ids{std::size_t(rng() % 50), std::size_t(rng() % 50)};
    buf.update(ids, std::vector<double>{n01(rng), 5 * n01(rng)});
  }
  double sum = 0;
  for (std::size_t i = 0; i < 50; ++i) sum += std::pow(buf.priority(i), cfg.alpha);
  EXPECT_NEAR(buf.total(), sum, 1e-9);

  const std::vector<std::size_t> one{3};
  buf.update(one, std::vector<double>{0.0});
  EXPECT_EQ(buf.priority(3), cfg.eps);
  buf.update(one, std::vector<double>{-0.5});
  const double p_small = buf.priority(3);
  buf.update(one, std::vector<double>{2.0});
  EXPECT_GT(buf.priority(3), p_small);
  EXPECT_EQ(p_small, 0.5 + cfg.eps);

  const std::vector<std::size_t> bad{50};
  EXPECT_THROW(buf.update(bad, std::vector<double>{1.0}), DataError);
}

TEST(Replay, ImportanceWeightsFollowDefinition) {
  TransitionSet d(1);
  for (int i = 0; i < 4; ++i) d.add(std::vector<double>{0.0}, 0, 0.0, std::vector<double>{0.0}, true);
  PerConfig cfg;
  ReplayBuffer buf(d, cfg);
  const std::vector<std::size_t> ids{0, 1, 2, 3};
  buf.update(ids, std::vector<double>{0.0, 1.0, 2.0, 3.0});
  std::mt19937_64 rng(6);
  const double beta = 0.7;
  const auto s = buf.sample(64, beta, rng);
  std::vector<double> raw;
  for (auto id : s.ids) raw.push_back(std::pow(4.0 * buf.probability(id), -beta));
  const double mx = *std::max_element(raw.begin(), raw.end());
  for (std::size_t k = 0; k < raw.size(); ++k) EXPECT_NEAR(s.weights[k], raw[k] / mx, 1e-12);
}

// ---------------------------------------------------------------- transitions

TEST(Transitions, BuiltPerBinWithTerminalLast) {
  discretize::Episode ep;
  ep.patient_id = "p";
  ep.actions = {3, 4, 24};
  Tensor emb = Tensor::from_rows({{0, 1}, {2, 3}, {4, 5}});
  const auto set = build_transitions({&ep}, {emb}, {{0.1, 0.2, 0.3}});
  ASSERT_EQ(set.size(), 3u);
  EXPECT_EQ(set.actions, (std::vector<int>{3, 4, 24}));
  EXPECT_EQ(set.terminal, (std::vector<std::uint8_t>{0, 0, 1}));
  EXPECT_EQ(std::vector<double>(set.next_state(0).begin(), set.next_state(0).end()), (std::vector<double>{2, 3}));
  EXPECT_EQ(set.rewards[2], 0.3);
  EXPECT_THROW(build_transitions({&ep}, {emb}, {{0.1, 0.2}}), DimensionError);
}

// ---------------------------------------------------------------- training

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  EXPECT_EQ(train_config_to_json(train_config_from_json(train_config_to_json(c))), train_config_to_json(c));
}

TEST(Train, RejectsActionsOutsideActionSpace) {
  TransitionSet d(1);
  d.add(std::vector<double>{0.0}, 2, 0.0, std::vector<double>{0.0}, true);
  TrainConfig c = toy_config(0);
  c.steps = 5;
  EXPECT_THROW(train(d, c), DataError);
}

TEST(Train, ChainConvergesToValueIterationForFiveSeeds) {
  const auto q_star = chain_q_star();
  const auto data = chain_data();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto snap = train(data, toy_config(seed));
    double err = 0;
    for (std::size_t s = 0; s < 2; ++s) {
      const auto q = snap.network.q_values(one_hot(s, 2));
      for (std::size_t a = 0; a < 2; ++a) err = std::max(err, std::abs(q[a] - q_star[s][a]));
    }
    EXPECT_LT(err, 0.05) << "seed " << seed;
  }
}

TEST(Train, ZeroGammaLearnsConditionalMeanReward) {
  TransitionSet d(3);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::map<std::pair<std::size_t, int>, std::pair<double, int>> sums;
  const double means[3][2] = {{0.5, -0.2}, {1.0, 0.3}, {-0.7, 0.0}};
  for (int i = 0; i < 600; ++i) {
    const std::size_t s = i % 3;
    const int a = (i / 3) % 2;
    const double r = means[s][a] + noise(rng);
    d.add(one_hot(s, 3), a, r, one_hot((s + 1) % 3, 3), false);
    sums[{s, a}].first += r;
    sums[{s, a}].second += 1;
  }
  TrainConfig c = toy_config(1);
  c.gamma = 0.0;
  c.lr = TrainConfig{}.lr;
  const auto snap = train(d, c);
  // Per cell: within half the smallest gap between cell means (0.2). On
  // average: within 0.05.
  double total_err = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto q = snap.network.q_values(one_hot(s, 3));
    for (int a = 0; a < 2; ++a) {
      const auto& [sum, n] = sums[{s, a}];
      EXPECT_NEAR(q[a], sum / n, 0.1) << s << "," << a;
      total_err += std::abs(q[a] - sum / n);
    }
  }
  EXPECT_LT(total_err / 6.0, 0.05);
}

TEST(Train, SameSeedSameSnapshotAndOfflineOnly) {
  TransitionSet d(4);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 300; ++i) {
    std::vector<double> s{n01(rng), n01(rng), n01(rng), n01(rng)}, s2{n01(rng), n01(rng), n01(rng), n01(rng)};
    d.add(s, int(rng() % 25), n01(rng), s2, i % 18 == 17);
  }
  TrainConfig c;
  c.steps = 400;
  c.log_every = 100;
  c.seed = 3;
  const auto calls = cohort::simulation_calls();
  const auto a = train(d, c);
  const auto b = train(d, c);
  EXPECT_EQ(cohort::simulation_calls(), calls);
  const auto pa = a.network.parameters(), pb = b.network.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  c.seed = 4;
  const auto other = train(d, c);
  EXPECT_NE(other.network.parameters()[0]->value, pa[0]->value);
}

TEST(Train, DivergenceAborts) {
  auto data = chain_data();
  TrainConfig c = toy_config(0);
  c.steps = 50;
  c.log_every = 10;
  c.divergence_loss = 1e-12;
  EXPECT_THROW(train(data, c), DivergenceError);
  data.rewards[0] = std::nan("");
  c.divergence_loss = 1e6;
  try {
    train(data, c);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos);
  }
}

TEST(Snapshot, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "hemorl_test_snapshot";
  std::filesystem::remove_all(dir);
  TrainConfig c = toy_config(2);
  c.steps = 60;
  c.log_every = 20;
  auto snap = train(chain_data(), c);
  snap.embed_hash = "abc";
  snap.reward_spec = {{"kind", "short_term"}};
  snap.save(dir);
  const auto back = PolicySnapshot::load(dir);
  for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(back.network.q_values(one_hot(s, 2)), snap.network.q_values(one_hot(s, 2)));
  EXPECT_EQ(back.embed_hash, "abc");
  EXPECT_EQ(back.reward_spec, snap.reward_spec);
  EXPECT_EQ(train_config_to_json(back.config), train_config_to_json(c));
  ASSERT_EQ(back.log.size(), 3u);
  EXPECT_EQ(back.log[2].mean_q, snap.log[2].mean_q);

  std::string ckpt = read_file(dir / "qnet.json");
  ckpt.back() = ckpt.back() == ' ' ? '\n' : ' ';
  write_file_atomic(dir / "qnet.json", ckpt);
  EXPECT_THROW(PolicySnapshot::load(dir), DataError);
  std::filesystem::remove_all(dir);
}
