#include <benchmark/benchmark.h>

#include <torch/torch.h>

#include "pgdiffseg/data.hpp"
#include "pgdiffseg/losses.hpp"
#include "pgdiffseg/network.hpp"
#include "pgdiffseg/sampler.hpp"
#include "pgdiffseg/schedule.hpp"
#include "pgdiffseg/trainer.hpp"

using namespace pgdiffseg;

namespace {

ModelConfig toy(int size) {
  auto m = ModelConfig::with_base(16, size);
  m.time_embed_dim = 64;
  m.res_blocks = 1;
  m.sdb_layers = 2;
  return m;
}

void BM_Schedule(benchmark::State& state) {
  const int steps = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(make_linear_schedule(steps).alpha_bar(steps));
}
BENCHMARK(BM_Schedule)->Arg(200)->Arg(1000);

void BM_QSample(benchmark::State& state) {
  const auto sched = make_linear_schedule(1000);
  auto x0 = torch::ones({8, 1, 64, 64});
  auto eps = torch::randn_like(x0);
  for (auto _ : state) benchmark::DoNotOptimize(q_sample(x0, 500, eps, sched));
}
BENCHMARK(BM_QSample);

void BM_Psa(benchmark::State& state) {
  torch::NoGradGuard ng;
  const auto side = state.range(0);
  ParamSharedAttention psa(32, 8);
  auto a = torch::randn({1, 32, side, side}), b = torch::randn({1, 32, side, side});
  for (auto _ : state) benchmark::DoNotOptimize(psa->forward(a, b));
  state.SetComplexityN(side * side);
}
BENCHMARK(BM_Psa)->RangeMultiplier(2)->Range(4, 32)->Complexity(benchmark::oNSquared);

void BM_DiceBce(benchmark::State& state) {
  auto y = (torch::rand({8, 1, 8, 8}) > 0.5).to(torch::kFloat32);
  auto p = torch::rand({8, 1, 8, 8});
  for (auto _ : state) {
    benchmark::DoNotOptimize(dice_loss(y, p, 1e-6));
    benchmark::DoNotOptimize(bce_loss(y, p));
  }
}
BENCHMARK(BM_DiceBce);

void BM_ModelForward(benchmark::State& state) {
  torch::NoGradGuard ng;
  const int size = static_cast<int>(state.range(0));
  PGDiffSeg model(toy(size));
  model->eval();
  auto x = torch::randn({1, 1, size, size}), img = torch::randn({1, 1, size, size});
  for (auto _ : state) benchmark::DoNotOptimize(model->predict_eps(x, img, 100));
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  TrainConfig t;
  t.diffusion_steps = 200;
  t.batch_size = static_cast<int>(state.range(0));
  Trainer tr(toy(64), t);
  const auto data = make_synthetic_dataset(static_cast<std::size_t>(t.batch_size), 64, 1);
  const auto batch = collate(data, 0, data.size());
  for (auto _ : state) benchmark::DoNotOptimize(tr.train_step(batch));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_DdimSample(benchmark::State& state) {
  const auto sched = make_linear_schedule(200);
  SamplerConfig c;
  c.kind = SamplerKind::ddim;
  c.nfe = static_cast<int>(state.range(0));
  Denoiser zero = [](const torch::Tensor& x, const torch::Tensor&, int) {
    return torch::zeros_like(x);
  };
  auto img = torch::zeros({4, 1, 64, 64});
  const auto seeds = item_seeds(0, 0, 4);
  for (auto _ : state) benchmark::DoNotOptimize(ddim_sample(zero, img, sched, c, seeds));
}
BENCHMARK(BM_DdimSample)->Arg(10)->Arg(200);

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
}
