#include <malloc.h>

#include <random>

#include <benchmark/benchmark.h>

#include "qdwi/diff/ops.hpp"
#include "qdwi/evaluation.hpp"
#include "qdwi/phantom.hpp"
#include "qdwi/training.hpp"

using namespace qdwi;

namespace {

Var<float> random_var(diff::Shape s, bool grad = false) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  Tensor<float> t(std::move(s));
  for (auto& v : t.values()) v = n(rng);
  return grad ? Var<float>::parameter(std::move(t), "p") : Var<float>::constant(std::move(t));
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const auto x = random_var({8, c, 48, 48});
  auto w = random_var({c, c, 3, 3}, true);
  auto b = random_var({c}, true);
  for (auto _ : state) {
    w.zero_grad();
    b.zero_grad();
    diff::backward(diff::mean(diff::conv2d(x, w, &b, 1, 1)));
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * 8 * 48 * 48 * c * c * 9);
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_GeneratorForward(benchmark::State& state) {
  GeneratorConfig c;
  c.base_width = static_cast<int>(state.range(0));
  const auto p = init_generator_params<float>(c, 1);
  const auto x = random_var({8, 3, 48, 48});
  const auto cond = condition_batch<float>(std::vector<std::array<float, 4>>(8, {0.6f, 0.0f, 0.8f, 0.5f}));
  for (auto _ : state) benchmark::DoNotOptimize(generator_forward(x, cond, p, c).value().data());
}
BENCHMARK(BM_GeneratorForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  PhantomSpec spec;
  const auto table = make_multishell_table({1000, 2000, 3000}, 30);
  const auto subject = simulate_subject(spec, table, 1, 0, Split::Train);
  SampleSet set(3, 3000, 1.5);
  set.add_subject(subject.structural, subject.dwis, table);
  TrainConfig c;
  c.generator.base_width = c.discriminator.base_width = static_cast<int>(state.range(0));
  auto st = init_train_state(c);
  BatchSampler sampler(set, c);
  for (auto _ : state) {
    state.PauseTiming();
    const auto batch = sampler.batch(st.step);
    state.ResumeTiming();
    benchmark::DoNotOptimize(train_step(batch, st, c).g_total);
  }
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_DtiFit(benchmark::State& state) {
  PhantomSpec spec;
  spec.noise_sigma = 0;
  auto table = make_multishell_table({1000, 2000, 3000}, 30);
  const auto s = simulate_subject(spec, table, 2, 0, Split::Test);
  auto ratios = ratio_volume(s.structural, s.dwis, 1.5);
  prepend_b0(ratios, table, s.mask);
  for (auto _ : state) benchmark::DoNotOptimize(dti_fit(ratios, table, s.mask).coeffs.data());
}
BENCHMARK(BM_DtiFit)->Unit(benchmark::kMillisecond);

void BM_Ssim3d(benchmark::State& state) {
  const std::array<int, 3> dims{48, 48, 16};
  std::vector<float> a(48 * 48 * 16), b(a.size());
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = u(rng), b[i] = u(rng);
  const std::vector<std::uint8_t> mask(a.size(), 1);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b, dims, mask));
}
BENCHMARK(BM_Ssim3d)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
