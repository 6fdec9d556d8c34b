#include <benchmark/benchmark.h>

#include "gradinv/autodiff.hpp"
#include "gradinv/nn.hpp"
#include "gradinv/rng.hpp"

using namespace gradinv;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

}  // namespace

static void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  int hw = static_cast<int>(state.range(0));
  Tensor x = random_tensor({1, 8, hw, hw}, rng);
  Tensor k = random_tensor({16, 8, 3, 3}, rng);
  for (auto _ : state) {
    ad::Graph g;
    benchmark::DoNotOptimize(ad::conv2d(g, x, k, 1, 1));
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

static void BM_ModelForwardBackward(benchmark::State& state) {
  Rng rng(2);
  int hw = static_cast<int>(state.range(0));
  nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(hw, 10);
  nn::ModelState model = nn::init_model(spec, 3);
  Tensor x = random_tensor({1, 3, hw, hw}, rng);
  for (auto _ : state) {
    ad::Graph g;
    benchmark::DoNotOptimize(nn::batch_gradient(g, spec, model.params, x, {4}));
  }
}
BENCHMARK(BM_ModelForwardBackward)->Arg(8)->Arg(16);

static void BM_DoubleBackward(benchmark::State& state) {
  // gradient of a gradient-matching scalar w.r.t. the input batch
  Rng rng(3);
  int hw = static_cast<int>(state.range(0));
  nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(hw, 10);
  nn::ModelState model = nn::init_model(spec, 4);
  Tensor x = random_tensor({1, 3, hw, hw}, rng);
  for (auto _ : state) {
    ad::Graph g;
    Tensor xb = g.bind(x);
    std::vector<Tensor> grads = nn::batch_gradient(g, spec, model.params, xb, {4});
    Tensor acc;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor term = ad::sum_all(g, ad::mul(g, grads[i], grads[i]));
      acc = i == 0 ? term : ad::add(g, acc, term);
    }
    benchmark::DoNotOptimize(ad::backward(g, acc, std::vector<Tensor>{xb}));
  }
}
BENCHMARK(BM_DoubleBackward)->Arg(8)->Arg(16);
