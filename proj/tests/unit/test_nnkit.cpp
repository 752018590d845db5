#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "hemorl/errors.hpp"
#include "hemorl/nnkit/checkpoint.hpp"
#include "hemorl/nnkit/gradcheck.hpp"
#include "hemorl/nnkit/layers.hpp"
#include "hemorl/nnkit/optim.hpp"
#include "hemorl/nnkit/recurrent.hpp"
#include "oracles.hpp"

using namespace hemorl;
using namespace hemorl::nn;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = d(rng);
  return t;
}

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  }
  return m;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Tensor, RejectsMismatchedDataLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), DimensionError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Dense, IdentityWeightsPassInputThrough) {
  Sequential net({LayerSpec::dense(2, 2)}, 1);
  auto params = net.parameters();
  params[0]->value = Tensor({2, 2}, {1, 0, 0, 1});
  params[1]->value.fill(0.0);
  const Tensor y = net.forward(Tensor::row({1, 2}), Mode::eval);
  EXPECT_EQ(to_vec(y), (std::vector<double>{1, 2}));
}

TEST(LeakyRelu, SlopeAppliesToNegativeInputs) {
  Sequential net({LayerSpec::leaky_relu(2, 0.01)}, 1);
  const Tensor y = net.forward(Tensor::row({-1, 2}), Mode::train);
  EXPECT_DOUBLE_EQ(y[0], -0.01);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
}

TEST(LayerSpec, ValidatesSlopeAndDims) {
  EXPECT_THROW(LayerSpec::leaky_relu(3, 1.5).validate(), ConfigError);
  EXPECT_THROW(LayerSpec::leaky_relu(3, 0.0).validate(), ConfigError);
  EXPECT_THROW(LayerSpec::dense(0, 3).validate(), ConfigError);
  EXPECT_NO_THROW(LayerSpec::batchnorm(4).validate());
}

TEST(BatchNorm, TrainModeHandExample) {
  Sequential net({LayerSpec::batchnorm(1, 0.9, 1e-15)}, 1);
  const Tensor y = net.forward(Tensor::from_rows({{0}, {2}}), Mode::train);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(BatchNorm, TrainOutputIsStandardisedPerFeature) {
  std::mt19937_64 rng(3);
  for (std::size_t batch : {2u, 5u, 17u}) {
    Sequential net({LayerSpec::batchnorm(4)}, 2);
    Tensor x = random_matrix(batch, 4, rng, 3.0);
    const Tensor y = net.forward(x, Mode::train);
    for (std::size_t j = 0; j < 4; ++j) {
      double mean = 0.0;
      double var = 0.0;
      for (std::size_t i = 0; i < batch; ++i) mean += y.at(i, j);
      mean /= static_cast<double>(batch);
      for (std::size_t i = 0; i < batch; ++i) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
      var /= static_cast<double>(batch);
      EXPECT_NEAR(mean, 0.0, 1e-12);
      EXPECT_NEAR(var, 1.0, 1e-3);  // eps = 1e-5 pulls the variance slightly below 1
    }
  }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  Sequential net({LayerSpec::batchnorm(1, 0.5, 1e-5)}, 1);
  net.forward(Tensor::from_rows({{0}, {2}}), Mode::train);
  // running_mean = 0.5 * 0 + 0.5 * 1, running_var = 0.5 * 1 + 0.5 * 1 (batch variance)
  const Tensor y = net.forward(Tensor::from_rows({{0.5}}), Mode::eval);
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  const Tensor y2 = net.forward(Tensor::from_rows({{0.5 + std::sqrt(1.0 + 1e-5)}}), Mode::eval);
  EXPECT_NEAR(y2[0], 1.0, 1e-12);
}

TEST(BatchNorm, EvalMatchesTrainOnTheBatchItWasFedWithZeroMomentum) {
  Sequential net({LayerSpec::batchnorm(3, 0.0, 1e-5)}, 1);
  const Tensor x = Tensor::from_rows({{0, 1, 5}, {2, 1, -1}, {1, 4, 0}, {7, 0, 2}});
  const Tensor yt = net.forward(x, Mode::train);
  const Tensor ye = net.forward(x, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(ye[i], yt[i], 1e-12);
}

TEST(Sequential, DimensionErrorNamesLayer) {
  Sequential net({LayerSpec::dense(3, 4), LayerSpec::leaky_relu(4)}, 1, "probe");
  try {
    net.forward(Tensor::row({1, 2}), Mode::eval);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("probe.0.dense"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Sequential({LayerSpec::dense(3, 4), LayerSpec::dense(5, 1)}, 1), DimensionError);
}

TEST(Sequential, EvalForwardIsBitwiseDeterministic) {
  Sequential net({LayerSpec::dense(5, 8), LayerSpec::batchnorm(8), LayerSpec::leaky_relu(8), LayerSpec::dense(8, 3)},
                 11);
  std::mt19937_64 rng(5);
  net.forward(random_matrix(7, 5, rng), Mode::train);
  const Tensor x = random_matrix(4, 5, rng);
  EXPECT_EQ(net.forward(x, Mode::eval), net.forward(x, Mode::eval));
  EXPECT_EQ(net.infer(x), net.forward(x, Mode::eval));
}

TEST(Sequential, SameSeedSameWeights) {
  const std::vector<LayerSpec> specs{LayerSpec::dense(4, 6), LayerSpec::dense(6, 2)};
  Sequential a(specs, 42);
  Sequential b(specs, 42);
  Sequential c(specs, 43);
  EXPECT_EQ(a.parameters()[0]->value, b.parameters()[0]->value);
  EXPECT_NE(a.parameters()[0]->value, c.parameters()[0]->value);
}

TEST(Sequential, GlorotLimitRespected) {
  Sequential net({LayerSpec::dense(10, 20)}, 9);
  const double limit = std::sqrt(6.0 / 30.0);
  for (double w : net.parameters()[0]->value.values()) EXPECT_LE(std::fabs(w), limit);
}

TEST(Backward, HalfSquaredNormScalar) {
  // L = 0.5 (W x)^2 with W = 3, x = 1: dL/dy = y = 3, dL/dW = y * x = 3.
  Sequential net({LayerSpec::dense(1, 1)}, 1);
  auto params = net.parameters();
  params[0]->value = Tensor({1, 1}, {3.0});
  params[1]->value.fill(0.0);
  const Tensor y = net.forward(Tensor::row({1.0}), Mode::train);
  net.zero_grad();
  net.backward(y);
  EXPECT_DOUBLE_EQ(params[0]->grad[0], 3.0);

  // With x = 3 the same loss gives dL/dW = W x^2 = 27.
  const Tensor y3 = net.forward(Tensor::row({3.0}), Mode::train);
  net.zero_grad();
  net.backward(y3);
  EXPECT_DOUBLE_EQ(params[0]->grad[0], 27.0);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  Sequential net({LayerSpec::dense(3, 4), LayerSpec::batchnorm(4), LayerSpec::leaky_relu(4), LayerSpec::dense(4, 2)},
                 3);
  std::mt19937_64 rng(1);
  const Tensor y = net.forward(random_matrix(5, 3, rng), Mode::train);
  net.zero_grad();
  net.backward(Tensor(y.shape(), 0.0));
  for (auto* p : net.parameters()) {
    for (double g : p->grad.values()) EXPECT_EQ(g, 0.0) << p->name;
  }
}

TEST(Backward, WithoutForwardIsStateError) {
  Sequential net({LayerSpec::dense(2, 2)}, 1);
  EXPECT_THROW(net.backward(Tensor::row({1, 1})), StateError);
  std::mt19937_64 rng(1);
  Lstm cell(LayerSpec::lstm(2, 3), rng, "cell");
  EXPECT_THROW(cell.backward_sequence({Tensor::matrix(1, 3)}), StateError);
}

TEST(L1, SubgradientSignRule) {
  Parameter p;
  p.name = "w";
  p.value = Tensor({3}, {-2.0, 0.0, 5.0});
  p.grad = Tensor({3}, 0.0);
  add_l1_subgradient({&p}, 0.1);
  EXPECT_DOUBLE_EQ(p.grad[0], -0.1);
  EXPECT_DOUBLE_EQ(p.grad[1], 0.0);
  EXPECT_DOUBLE_EQ(p.grad[2], 0.1);
  EXPECT_DOUBLE_EQ(l1_norm({&p}), 7.0);
}

TEST(GradCheck, DenseLeakyPasses) {
  Sequential net({LayerSpec::dense(4, 3), LayerSpec::leaky_relu(3)}, 7);
  std::mt19937_64 rng(7);
  const auto r = grad_check(net, random_matrix(5, 4, rng), 1e-4);
  EXPECT_TRUE(r.pass) << r.worst_param << " " << r.max_rel_error;
  EXPECT_GT(r.checked, 0u);
}

TEST(GradCheck, CorruptedGradientFails) {
  Sequential net({LayerSpec::dense(3, 2)}, 7);
  std::mt19937_64 rng(7);
  const Tensor x = random_matrix(4, 3, rng);
  const Tensor c = random_matrix(4, 2, rng);
  auto params = net.parameters();
  auto loss = [&] {
    const Tensor y = net.forward(x, Mode::train);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * c[i];
    return s;
  };
  auto backprop = [&] {
    net.zero_grad();
    net.forward(x, Mode::train);
    net.backward(c);
    params[0]->grad[0] += 0.1;
  };
  const auto r = grad_check(params, loss, backprop, 1e-4);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.worst_param, params[0]->name);
  EXPECT_EQ(r.worst_index, 0u);
  // Relative error of the injected element is 0.1 / max(1, |numeric|).
  net.zero_grad();
  net.forward(x, Mode::train);
  net.backward(c);
  const double numeric = params[0]->grad[0];
  EXPECT_NEAR(r.max_rel_error, 0.1 / std::max(1.0, std::fabs(numeric)), 1e-6);
}

TEST(GradCheck, NonFiniteGradientFailsWithParameterPath) {
  Sequential net({LayerSpec::dense(2, 2)}, 1);
  auto params = net.parameters();
  auto loss = [] { return 0.0; };
  auto backprop = [&] {
    net.zero_grad();
    params[1]->grad[0] = std::numeric_limits<double>::quiet_NaN();
  };
  const auto r = grad_check(params, loss, backprop, 1e-4);
  EXPECT_FALSE(r.pass);
  EXPECT_NE(r.failure.find(params[1]->name), std::string::npos) << r.failure;
}

class LayerGradients : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradients, EveryKindMatchesFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  {
    Sequential dense({LayerSpec::dense(3, 4)}, seed);
    EXPECT_TRUE(grad_check(dense, random_matrix(5, 3, rng), 1e-4, Mode::train, seed).pass) << "dense";
  }
  {
    Sequential bn({LayerSpec::batchnorm(3)}, seed);
    auto ps = bn.parameters();
    for (double& v : ps[0]->value.values()) v = 0.5 + std::abs(std::normal_distribution<double>()(rng));
    EXPECT_TRUE(grad_check(bn, random_matrix(6, 3, rng), 1e-4, Mode::train, seed).pass) << "batchnorm train";
    EXPECT_TRUE(grad_check(bn, random_matrix(6, 3, rng), 1e-4, Mode::eval, seed).pass) << "batchnorm eval";
  }
  {
    Sequential lr({LayerSpec::leaky_relu(4, 0.01)}, seed);
    EXPECT_TRUE(grad_check(lr, random_matrix(5, 4, rng), 1e-4, Mode::train, seed).pass) << "leaky_relu";
  }
  {
    std::mt19937_64 init(seed);
    Lstm lstm(LayerSpec::lstm(3, 4), init, "lstm");
    std::vector<Tensor> xs{random_matrix(2, 3, rng), random_matrix(2, 3, rng), random_matrix(2, 3, rng)};
    const auto r = grad_check(lstm, xs, 1e-4, {}, seed);
    EXPECT_TRUE(r.pass) << "lstm " << r.worst_param << " " << r.max_rel_error;
  }
  {
    std::mt19937_64 init(seed);
    Gru gru(LayerSpec::gru(3, 4), init, "gru");
    std::vector<Tensor> xs{random_matrix(2, 3, rng), random_matrix(2, 3, rng), random_matrix(2, 3, rng)};
    const auto r = grad_check(gru, xs, 1e-4, {}, seed);
    EXPECT_TRUE(r.pass) << "gru " << r.worst_param << " " << r.max_rel_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGradients, ::testing::Range(0, 20));

TEST(GradCheck, FullQNetworkStack) {
  Sequential net({LayerSpec::dense(5, 8), LayerSpec::batchnorm(8), LayerSpec::leaky_relu(8), LayerSpec::dense(8, 8),
                  LayerSpec::batchnorm(8), LayerSpec::leaky_relu(8), LayerSpec::dense(8, 3)},
                 21);
  std::mt19937_64 rng(21);
  const auto r = grad_check(net, random_matrix(6, 5, rng), 1e-4);
  EXPECT_TRUE(r.pass) << r.worst_param << " " << r.max_rel_error;
}

TEST(GradCheck, RecurrentWithPaddedLengths) {
  std::mt19937_64 rng(4);
  std::vector<Tensor> xs;
  for (int t = 0; t < 4; ++t) xs.push_back(random_matrix(3, 2, rng));
  std::mt19937_64 init(4);
  Lstm lstm(LayerSpec::lstm(2, 3), init, "lstm");
  EXPECT_TRUE(grad_check(lstm, xs, 1e-4, {4, 2, 1}, 4).pass);
  Gru gru(LayerSpec::gru(2, 3), init, "gru");
  EXPECT_TRUE(grad_check(gru, xs, 1e-4, {1, 4, 3}, 4).pass);
}

TEST(Recurrent, LstmMatchesNaiveOracle) {
  std::mt19937_64 rng(8);
  Lstm cell(LayerSpec::lstm(3, 4), rng, "lstm");
  const Tensor x = random_matrix(1, 3, rng);
  RecurrentState s{random_matrix(1, 4, rng), random_matrix(1, 4, rng)};
  const auto got = recurrent_step(cell, x, s);
  const auto want = oracle::lstm_step(to_vec(x), to_vec(s.h), to_vec(s.c), to_mat(cell.wx().value),
                                      to_mat(cell.wh().value), to_vec(cell.bias().value));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(got.h[j], want.h[j], 1e-14);
    EXPECT_NEAR(got.c[j], want.c[j], 1e-14);
  }
}

TEST(Recurrent, GruMatchesNaiveOracle) {
  std::mt19937_64 rng(9);
  Gru cell(LayerSpec::gru(3, 4), rng, "gru");
  for (double& v : cell.bias_x().value.values()) v = 0.3;
  for (double& v : cell.bias_h().value.values()) v = -0.2;
  const Tensor x = random_matrix(1, 3, rng);
  RecurrentState s{random_matrix(1, 4, rng), {}};
  const auto got = recurrent_step(cell, x, s);
  const auto want = oracle::gru_step(to_vec(x), to_vec(s.h), to_mat(cell.wx().value), to_mat(cell.wh().value),
                                     to_vec(cell.bias_x().value), to_vec(cell.bias_h().value));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got.h[j], want[j], 1e-14);
}

TEST(Recurrent, LstmZeroWeightsGiveZeroHidden) {
  std::mt19937_64 rng(1);
  Lstm cell(LayerSpec::lstm(2, 3), rng, "lstm");
  for (auto* p : cell.parameters()) p->value.fill(0.0);
  const auto s = recurrent_step(cell, Tensor::row({0.7, -1.2}), cell.zero_state(1));
  for (double v : s.h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Recurrent, LstmForgetBiasInitialisedToOne) {
  std::mt19937_64 rng(1);
  Lstm cell(LayerSpec::lstm(2, 3), rng, "lstm");
  for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(cell.bias().value[j], (j >= 3 && j < 6) ? 1.0 : 0.0);
}

TEST(Recurrent, GruSaturatedUpdateGateKeepsState) {
  std::mt19937_64 rng(2);
  Gru cell(LayerSpec::gru(2, 3), rng, "gru");
  for (std::size_t j = 3; j < 6; ++j) cell.bias_x().value[j] = 50.0;
  const Tensor h = Tensor::row({0.3, -0.8, 0.5});
  const auto s = recurrent_step(cell, Tensor::row({1.0, -2.0}), {h, {}});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s.h[j], h[j], 1e-12);
}

TEST(Recurrent, InputWidthMismatchThrows) {
  std::mt19937_64 rng(2);
  Gru cell(LayerSpec::gru(2, 3), rng, "gru");
  EXPECT_THROW(recurrent_step(cell, Tensor::row({1.0, 2.0, 3.0}), cell.zero_state(1)), DimensionError);
  EXPECT_THROW(recurrent_step(cell, Tensor::row({1.0, 2.0}), cell.zero_state(2)), DimensionError);
}

TEST(Recurrent, PaddedRowsCarryStateForward) {
  std::mt19937_64 rng(6);
  Lstm cell(LayerSpec::lstm(2, 3), rng, "lstm");
  std::vector<Tensor> xs;
  for (int t = 0; t < 5; ++t) xs.push_back(random_matrix(2, 2, rng));
  const auto hs = cell.forward_sequence(xs, {5, 2});
  EXPECT_EQ(to_vec(hs[4]).at(3), hs[1].at(1, 0));
  // Row 1 alone, unrolled for two steps.
  std::vector<Tensor> solo;
  for (int t = 0; t < 2; ++t) solo.push_back(Tensor::row({xs[t].at(1, 0), xs[t].at(1, 1)}));
  const auto hs_solo = cell.forward_sequence(solo);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(hs[4].at(1, j), hs_solo[1][j]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p{"w", Tensor({1}, {0.5}), Tensor({1}, {1.0}), true};
  AdamState s = make_adam_state({&p}, {0.1, 0.9, 0.999, 1e-8});
  adam_step({&p}, s);
  EXPECT_NEAR(p.value[0] - 0.5, -0.1, 1e-8);
  EXPECT_EQ(s.step, 1u);
  // Direct-formula oracle for step two with g = 1 again.
  const double m = 0.9 * 0.1 + 0.1;
  const double v = 0.999 * 0.001 + 0.001;
  const double expected = p.value[0] - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  const double before = p.value[0];
  adam_step({&p}, s);
  EXPECT_NEAR(p.value[0], expected, 1e-15);
  EXPECT_LT(p.value[0], before);
}

TEST(Adam, ZeroGradientNeverMovesParameters) {
  Parameter p{"w", Tensor({2}, {0.5, -0.25}), Tensor({2}, {1.0, -3.0}), true};
  AdamState s = make_adam_state({&p}, {});
  adam_step({&p}, s);
  const Tensor after_one = p.value;
  const Tensor m1 = s.m[0];
  p.grad.fill(0.0);
  for (int k = 0; k < 5; ++k) adam_step({&p}, s);
  EXPECT_EQ(p.value, after_one);
  EXPECT_NEAR(s.m[0][0], m1[0] * std::pow(0.9, 5), 1e-15);
  EXPECT_EQ(s.step, 6u);

  Parameter fresh{"u", Tensor({3}, {1, 2, 3}), Tensor({3}, 0.0), true};
  AdamState fs = make_adam_state({&fresh}, {});
  adam_step({&fresh}, fs);
  EXPECT_EQ(fresh.value, Tensor({3}, {1, 2, 3}));
}

TEST(Adam, NaNGradientAbortsWithParameterName) {
  Parameter p{"trunk.W", Tensor({1}, {0.5}), Tensor({1}, {std::nan("")}), true};
  AdamState s = make_adam_state({&p}, {});
  try {
    adam_step({&p}, s);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("trunk.W"), std::string::npos);
  }
  EXPECT_EQ(p.value[0], 0.5);
}

TEST(Adam, SkipsNonTrainable) {
  Parameter p{"running_mean", Tensor({1}, {0.5}), Tensor({1}, {1.0}), false};
  AdamState s = make_adam_state({&p}, {});
  adam_step({&p}, s);
  EXPECT_EQ(p.value[0], 0.5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Sequential net({LayerSpec::dense(3, 4), LayerSpec::batchnorm(4), LayerSpec::leaky_relu(4, 0.2)}, 77);
  auto params = net.parameters();
  params[0]->value[0] = -0.0;
  params[0]->value[1] = std::numeric_limits<double>::denorm_min();
  params[0]->value[2] = 0.1 + 0.2;
  CheckpointHeader h;
  h.layers = net.specs();
  h.seed = 0xFFFFFFFFFFFFFFFFULL;
  h.extra = {{"arch", "test"}};
  const auto dir = std::filesystem::temp_directory_path() / "hemorl_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.json";
  std::vector<const Parameter*> cparams(params.begin(), params.end());
  save_checkpoint(path, h, cparams);
  const Checkpoint c = load_checkpoint(path);
  EXPECT_EQ(c.header.layers, net.specs());
  EXPECT_EQ(c.header.seed, h.seed);
  EXPECT_EQ(c.header.init_scheme, std::string(kInitScheme));
  EXPECT_EQ(c.header.extra, h.extra);

  Sequential other(net.specs(), 1);
  restore_parameters(c, other.parameters());
  auto op = other.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto a = params[i]->value.values();
    const auto b = op[i]->value.values();
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a[k]), std::bit_cast<std::uint64_t>(b[k]));
    }
  }
  Sequential wrong({LayerSpec::dense(3, 5)}, 1);
  EXPECT_THROW(restore_parameters(c, wrong.parameters()), DimensionError);
  std::filesystem::remove_all(dir);
}

TEST(Sequential, CopyIsDeep) {
  Sequential a({LayerSpec::dense(2, 2)}, 5);
  Sequential b = a;
  b.parameters()[0]->value.fill(9.0);
  EXPECT_NE(a.parameters()[0]->value, b.parameters()[0]->value);
  b.copy_values_from(a);
  EXPECT_EQ(a.parameters()[0]->value, b.parameters()[0]->value);
}
