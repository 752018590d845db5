#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "hemorl/agent/agent.hpp"
#include "hemorl/cohort/cohort.hpp"
#include "hemorl/discretize/discretize.hpp"
#include "hemorl/nnkit/layers.hpp"
#include "hemorl/nnkit/recurrent.hpp"

using namespace hemorl;

namespace {

nn::Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  auto t = nn::Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

void BM_DenseForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  nn::Dense layer(nn::LayerSpec::dense(n, n), rng, "d");
  const auto x = random_matrix(30, n, rng);
  const auto g = random_matrix(30, n, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(layer.forward(x, nn::Mode::train));
    benchmark::DoNotOptimize(layer.backward(g));
  }
}
BENCHMARK(BM_DenseForwardBackward)->Arg(32)->Arg(128);

// Autoencoder-shaped unroll: batch 32, 20 steps, 24 features.
void BM_RecurrentSequence(benchmark::State& state) {
  const bool gru = state.range(0) == 1;
  const auto hidden = static_cast<std::size_t>(state.range(1));
  std::mt19937_64 rng(2);
  auto spec = gru ? nn::LayerSpec::gru(24, hidden) : nn::LayerSpec::lstm(24, hidden);
  auto layer = nn::make_recurrent(spec, rng, "r");
  std::vector<nn::Tensor> xs, dhs;
  for (int t = 0; t < 20; ++t) {
    xs.push_back(random_matrix(32, 24, rng));
    dhs.push_back(random_matrix(32, hidden, rng));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(layer->forward_sequence(xs));
    benchmark::DoNotOptimize(layer->backward_sequence(dhs));
  }
  state.SetLabel(gru ? "gru" : "lstm");
}
BENCHMARK(BM_RecurrentSequence)->Args({0, 32})->Args({1, 32})->Args({0, 128});

agent::TransitionSet random_transitions(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  agent::TransitionSet data(dim);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> a(0, static_cast<int>(agent::kNumActions) - 1);
  std::vector<double> s(dim), s2(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : s) v = g(rng);
    for (auto& v : s2) v = g(rng);
    data.add(s, a(rng), g(rng), s2, i % 20 == 19);
  }
  return data;
}

// Full training steps (PER sample, DDQN targets, Adam, priority update).
void BM_AgentSteps(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto data = random_transitions(5000, 32, rng);
  agent::TrainConfig cfg;
  cfg.hidden = static_cast<std::size_t>(state.range(0));
  cfg.steps = 200;
  cfg.target_sync = 100;
  cfg.log_every = 100;
  for (auto _ : state) benchmark::DoNotOptimize(agent::train(data, cfg));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * cfg.steps));
}
BENCHMARK(BM_AgentSteps)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_SumTreeFind(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  agent::SumTree tree(n);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) tree.set(i, u(rng));
  for (auto _ : state) benchmark::DoNotOptimize(tree.find(u(rng) * tree.total()));
}
BENCHMARK(BM_SumTreeFind)->Arg(1 << 10)->Arg(1 << 17);

void BM_SumTreeSet(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  agent::SumTree tree(n);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> idx(0, n - 1);
  for (auto _ : state) tree.set(idx(rng), u(rng));
}
BENCHMARK(BM_SumTreeSet)->Arg(1 << 17);

void BM_Rebin(benchmark::State& state) {
  cohort::SimParams params;
  params.n_patients = 50;
  const auto logs = cohort::simulate_cohort(params, 1);
  discretize::RebinOptions opt;
  opt.bin_hours = static_cast<double>(state.range(0));
  for (auto _ : state) {
    for (const auto& log : logs) benchmark::DoNotOptimize(discretize::rebin(log, opt));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * logs.size()));
}
BENCHMARK(BM_Rebin)->Arg(1)->Arg(4)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
