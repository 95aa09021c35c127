#include <benchmark/benchmark.h>

#include "random_envelopes.hpp"
#include "random_services.hpp"
#include "random_worlds.hpp"
#include "somrs/entish.hpp"
#include "somrs/frp.hpp"
#include "somrs/planner.hpp"
#include "somrs/scenario.hpp"

using namespace somrs;

static void BM_FindBindings(benchmark::State& state) {
  std::mt19937 rng(7);
  const auto w = randworld::make_world(rng, static_cast<int>(state.range(0)));
  std::vector<entish::Formula> formulas;
  for (int i = 0; i < 32; ++i) formulas.push_back(randworld::make_formula(rng, w.map, 6));
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(entish::find_bindings(formulas[i++ % formulas.size()], w.map, w.ont));
  }
}
BENCHMARK(BM_FindBindings)->Arg(5)->Arg(20)->Arg(50);

static void BM_Plan(benchmark::State& state) {
  std::mt19937 rng(11);
  std::vector<randsvc::Problem> problems;
  for (int i = 0; i < 16; ++i) problems.push_back(randsvc::make_problem(rng, static_cast<int>(state.range(0))));
  planner::Options opts;
  opts.max_steps = 3;
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& p = problems[i++ % problems.size()];
    benchmark::DoNotOptimize(planner::plan(p.goal, p.world.map, p.world.ont, p.actions, opts));
  }
}
BENCHMARK(BM_Plan)->Arg(1)->Arg(3)->Arg(5);

static void BM_EncodeDecode(benchmark::State& state) {
  std::mt19937 rng(3);
  std::vector<frp::Envelope> envelopes;
  for (int i = 0; i < 64; ++i) envelopes.push_back(randenv::random_envelope(rng));
  std::size_t i = 0, bytes = 0;
  for (auto _ : state) {
    const auto frame = frp::encode(envelopes[i++ % envelopes.size()]);
    bytes += frame.size();
    benchmark::DoNotOptimize(frp::decode(frame));
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_EncodeDecode);

static void BM_Scenario(benchmark::State& state) {
  const auto cfg = scenario::load_config(std::string(SOMRS_SCENARIO_DIR) + "/scenario1b.yaml");
  for (auto _ : state) benchmark::DoNotOptimize(scenario::run(cfg).status);
}
BENCHMARK(BM_Scenario)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
