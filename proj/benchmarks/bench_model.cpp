#include <benchmark/benchmark.h>

#include <random>

#include "dsc/model.hpp"
#include "dsc/training.hpp"

using namespace dsc;

namespace {

ModelConfig bench_config(std::size_t d, std::size_t layers, std::size_t heads) {
  ModelConfig c;
  c.layers = layers;
  c.d = d;
  c.heads = heads;
  c.d_emb = 16;
  c.d_app = 16;
  c.d_mot = 12;
  c.d_reg = 20;
  c.d_typ = 8;
  c.vocab_size = 24;
  c.num_boundary_types = 3;
  c.max_caption_len = 16;
  c.max_temporal_len = 16;
  return c;
}

BoundarySample bench_sample(std::mt19937_64& rng, const ModelConfig& c) {
  std::normal_distribution<double> d(0.0, 1.0);
  const auto mat = [&](std::size_t r, std::size_t cols) {
    std::vector<double> v(r * cols);
    for (double& x : v) x = d(rng);
    return Tensor::matrix(r, cols, std::move(v));
  };
  BoundarySample s;
  s.boundary_id = "bench";
  s.appearance = mat(4, c.d_app);
  s.motion = mat(3, c.d_mot);
  s.regions = mat(5, c.d_reg);
  s.boundary_type_id = 0;
  return s;
}

}  // namespace

static void BM_ModelForward(benchmark::State& state) {
  const ModelConfig c = bench_config(static_cast<std::size_t>(state.range(0)), 2, 4);
  std::mt19937_64 rng(3);
  ModelParams params(c, 9);
  BoundarySample s = bench_sample(rng, c);
  std::vector<int> prefix = {Vocabulary::kBos, Vocabulary::kSubjectTag, 8, 9, 10};
  for (auto _ : state) {
    Graph g;
    benchmark::DoNotOptimize(model_forward(g, s, prefix, params, c));
  }
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(64)->Arg(128);

static void BM_ForwardBackwardLoss(benchmark::State& state) {
  const ModelConfig c = bench_config(static_cast<std::size_t>(state.range(0)), 2, 4);
  std::mt19937_64 rng(4);
  ModelParams params(c, 10);
  BoundarySample s = bench_sample(rng, c);
  std::vector<int> prefix = {Vocabulary::kBos, Vocabulary::kBeforeTag, 8, 9, 10};
  std::vector<int> targets = {8, 9, 10, Vocabulary::kEos};
  for (auto _ : state) {
    Graph g;
    ForwardResult fwd = model_forward(g, s, prefix, params, c);
    std::vector<std::size_t> rows = {1, 2, 3, 4};
    Tensor loss = dual_stream_loss(g, g.gather_rows(fwd.p_local, rows),
                                   g.gather_rows(fwd.p_global, rows), targets, 0.5, 0.5);
    benchmark::DoNotOptimize(g.gradients(loss));
  }
}
BENCHMARK(BM_ForwardBackwardLoss)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
