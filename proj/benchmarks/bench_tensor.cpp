#include <benchmark/benchmark.h>

#include <random>

#include "dsc/tensor.hpp"

using dsc::Graph;
using dsc::Tensor;

namespace {

Tensor randn(std::mt19937_64& rng, std::size_t r, std::size_t c, bool rg = false) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(r * c);
  for (double& x : v) x = d(rng);
  return Tensor::matrix(r, c, std::move(v), rg);
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  Tensor a = randn(rng, n, n);
  Tensor b = randn(rng, n, n);
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(g.matmul(a, b));
  }
  state.SetComplexityN(static_cast<int64_t>(n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 256)->Complexity();

static void BM_AttentionForwardBackward(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  Tensor q = randn(rng, rows, 64, true);
  Tensor k = randn(rng, rows, 64, true);
  Tensor v = randn(rng, rows, 64, true);
  for (auto _ : state) {
    Graph g;
    Tensor out = g.scaled_dot_attention(q, k, v);
    g.backward(g.sum(out));
    benchmark::DoNotOptimize(out);
  }
}
BENCHMARK(BM_AttentionForwardBackward)->RangeMultiplier(2)->Range(8, 64);
