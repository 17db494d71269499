#include <benchmark/benchmark.h>

#include "snp/gp_episodes.hpp"
#include "snp/nn.hpp"
#include "snp/rng.hpp"
#include "snp/shapes2d.hpp"
#include "snp/snp_model.hpp"
#include "snp/tape.hpp"
#include "snp/tgqn.hpp"

using namespace snp;

namespace {

Tensor<float> randn(std::vector<int> shape, Rng& rng, float std = 1.f) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal(0, std));
  return t;
}

void bm_conv2d_forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor<float> x = randn({c, 64, 64}, rng);
  Tensor<float> w = randn({c, c, 3, 3}, rng, 0.1f);
  for (auto _ : state) {
    Tape<float> t;
    t.set_grad_enabled(false);
    Var y = t.conv2d(t.constant(x), t.constant(w), Var{}, 1, 1);
    benchmark::DoNotOptimize(t.val(y).data.data());
  }
}
BENCHMARK(bm_conv2d_forward)->Arg(16)->Arg(32)->Arg(64);

void bm_convlstm_step(benchmark::State& state) {
  const int hid = static_cast<int>(state.range(0));
  Rng rng(3);
  ParamStore<float> ps;
  ConvLstmCell<float> cell(ps, "c", hid, hid, rng);
  Tensor<float> x = randn({hid, 16, 16}, rng);
  Tensor<float> h = randn({hid, 16, 16}, rng, 0.3f);
  for (auto _ : state) {
    Tape<float> t;
    t.set_grad_enabled(false);
    auto [h2, c2] = cell.step(t, t.constant(x), t.constant(h), t.constant(h));
    benchmark::DoNotOptimize(t.val(h2).data.data());
  }
}
BENCHMARK(bm_convlstm_step)->Arg(32)->Arg(64)->Arg(128);

void bm_gp_episode(benchmark::State& state) {
  uint64_t seed = 1;
  for (auto _ : state) {
    const auto ep = gp::sample_episode('b', seed++);
    benchmark::DoNotOptimize(ep.steps.data());
  }
}
BENCHMARK(bm_gp_episode);

void bm_env2d_episode(benchmark::State& state) {
  uint64_t seed = 1;
  for (auto _ : state) {
    const auto ep = env2d::sample_episode2d(Regime2D::prediction, 20, seed++);
    benchmark::DoNotOptimize(ep.steps.data());
  }
}
BENCHMARK(bm_env2d_episode)->Unit(benchmark::kMillisecond);

void bm_snp_elbo_backward(benchmark::State& state) {
  Snp1dConfig cfg;
  cfg.hidden = static_cast<int>(state.range(0));
  cfg.zdim = cfg.hidden;
  cfg.rdim = cfg.hidden;
  cfg.sdim = cfg.hidden;
  SnpModel<float> model(cfg);
  const Episode1D ep = gp::sample_episode('b', 7);
  for (auto _ : state) {
    model.params().zero_grads();
    Tape<float> t;
    Var loss = t.neg(model.elbo_snp(t, ep, Rng(3)));
    t.backward(loss);
    benchmark::DoNotOptimize(model.params().begin()->grad.data.data());
  }
}
BENCHMARK(bm_snp_elbo_backward)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void bm_tower_encode(benchmark::State& state) {
  TgqnConfig cfg;
  cfg.rep_depth = static_cast<int>(state.range(0));
  cfg.hidden = 32;
  cfg.enc_depth = 32;
  cfg.z_depth = 2;
  cfg.draw_steps = 2;
  TgqnModel<float> model(cfg);
  Rng rng(5);
  Obs2D o;
  o.view_row = 40;
  o.view_col = 90;
  o.patch.resize(static_cast<size_t>(64) * 64 * 3);
  for (auto& v : o.patch) v = static_cast<float>(rng.uniform(0, 1));
  for (auto _ : state) {
    Tape<float> t;
    t.set_grad_enabled(false);
    Var r = model.tower_encode(t, o);
    benchmark::DoNotOptimize(t.val(r).data.data());
  }
}
BENCHMARK(bm_tower_encode)->Arg(32)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
