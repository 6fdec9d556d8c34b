#include <benchmark/benchmark.h>

#include "gradinv/attack.hpp"
#include "gradinv/data.hpp"

using namespace gradinv;

namespace {

struct Setup {
  nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(8, 10);
  data::Dataset ds = data::gen_synthetic(16, 8, 11);
  nn::ModelState model = nn::init_model(spec, 5);

  fl::UpdateRecord delta_record(int local_steps) {
    std::vector<std::vector<int>> batches;
    for (int t = 0; t < local_steps; ++t) batches.push_back({t});
    auto [next, rec] = fl::run_round(spec, model, ds.images, ds.labels, batches, 1e-4,
                                     fl::UpdateKind::kModelDelta);
    return rec;
  }
};

}  // namespace

// One optimization iteration of the one-batch objective: the cost stays flat
// as the number of local steps grows.
static void BM_OneBatchIteration(benchmark::State& state) {
  Setup s;
  int local_steps = static_cast<int>(state.range(0));
  fl::UpdateRecord rec = s.delta_record(local_steps);
  attack::AttackConfig cfg;
  cfg.fedavg_mode = attack::FedAvgMode::kOneBatch;
  cfg.iterations = 1;
  cfg.init_seed = 2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(attack::reconstruct(rec, cfg, s.spec, s.ds.norm));
  }
}
BENCHMARK(BM_OneBatchIteration)->Arg(2)->Arg(4)->Arg(8);

// One iteration of the unrolled simulation objective: the cost grows with
// the number of local steps.
static void BM_SimulationIteration(benchmark::State& state) {
  Setup s;
  int local_steps = static_cast<int>(state.range(0));
  fl::UpdateRecord rec = s.delta_record(local_steps);
  attack::AttackConfig cfg;
  cfg.fedavg_mode = attack::FedAvgMode::kSimulation;
  cfg.iterations = 1;
  cfg.init_seed = 2;
  std::vector<std::vector<int>> labels;
  for (int t = 0; t < local_steps; ++t) labels.push_back({s.ds.labels[static_cast<std::size_t>(t)]});
  for (auto _ : state) {
    benchmark::DoNotOptimize(attack::reconstruct(rec, cfg, s.spec, s.ds.norm, &labels));
  }
}
BENCHMARK(BM_SimulationIteration)->Arg(2)->Arg(4)->Arg(8);

BENCHMARK_MAIN();
