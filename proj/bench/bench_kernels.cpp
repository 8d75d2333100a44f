// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include "tepo/env.hpp"
#include "tepo/grouping.hpp"
#include "tepo/objectives.hpp"

namespace {

using namespace tepo;

struct Fixture {
  TaskSpec task;
  SoftmaxPolicy old_policy = SoftmaxPolicy::linear(Vocabulary{12}, 3);
  SoftmaxPolicy new_policy = SoftmaxPolicy::linear(Vocabulary{12}, 3);
  std::vector<Prompt> prompts;
  std::vector<RolloutGroup> groups;
  std::vector<AdvantageSet> adv;

  explicit Fixture(int n_prompts) {
    Rng rng(11);
    old_policy.randomize(rng, 0.3);
    new_policy = old_policy;
    for (auto& x : new_policy.params()) x += 0.05 * rng.normal();
    prompts = generate_prompts(task, static_cast<std::size_t>(n_prompts), 5);
    groups = collect_groups_serial(old_policy, task, prompts, 8, task.max_response_len, 1.0, 3);
    for (auto& g : groups) {
      for (auto& r : g.rewards) r = rng.uniform(0.0, 1.0);
      adv.push_back(normalize_advantages(g.rewards));
    }
  }
};

Fixture& fixture() {
  static Fixture f(64);
  return f;
}

void BM_LossAndGradParallel(benchmark::State& state) {
  auto& f = fixture();
  const auto cfg = tepo_objective(0.01);
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_and_grad(f.groups, f.adv, f.new_policy, f.old_policy, cfg).objective);
  }
}
BENCHMARK(BM_LossAndGradParallel)->Unit(benchmark::kMillisecond);

void BM_LossAndGradSerial(benchmark::State& state) {
  auto& f = fixture();
  const auto cfg = tepo_objective(0.01);
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_and_grad_serial(f.groups, f.adv, f.new_policy, f.old_policy, cfg).objective);
  }
}
BENCHMARK(BM_LossAndGradSerial)->Unit(benchmark::kMillisecond);

void BM_CollectGroupsParallel(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(collect_groups(f.old_policy, f.task, f.prompts, 8, 16, 1.0, 9).size());
  }
}
BENCHMARK(BM_CollectGroupsParallel)->Unit(benchmark::kMillisecond);

void BM_CollectGroupsSerial(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(collect_groups_serial(f.old_policy, f.task, f.prompts, 8, 16, 1.0, 9).size());
  }
}
BENCHMARK(BM_CollectGroupsSerial)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
