// Serial-vs-OpenMP kernel comparison. Run with POINTSEG_THREADS=<n> to
// pin the parallel variant's thread count.

#include <benchmark/benchmark.h>

#include "pointseg/kernels.hpp"
#include "pointseg/rng.hpp"
#include "pointseg/tensor.hpp"

using namespace pointseg;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  rng::Stream s(seed, "bench");
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = s.uniform(static_cast<std::uint64_t>(i), -1.0, 1.0);
  return t;
}

void bm_gemm_serial(benchmark::State& state) {
  const auto n = state.range(0);
  Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2), c({n, n});
  for (auto _ : state) {
    kern::gemm_serial(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::ClobberMemory();
  }
}

void bm_gemm_parallel(benchmark::State& state) {
  const auto n = state.range(0);
  Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2), c({n, n});
  for (auto _ : state) {
    kern::gemm_parallel(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::ClobberMemory();
  }
}

void bm_conv_serial(benchmark::State& state) {
  const auto hw = state.range(0);
  kern::Conv2dShape s{8, 16, hw, hw, 16, 3, 3, 1, 1};
  Tensor x = random_tensor({8, 16, hw, hw}, 3);
  Tensor w = random_tensor({16, 16, 3, 3}, 4);
  Tensor b = random_tensor({16}, 5);
  Tensor y({8, 16, s.oh(), s.ow()});
  for (auto _ : state) {
    kern::conv2d_forward_serial(s, x.data(), w.data(), b.data(), y.data());
    benchmark::ClobberMemory();
  }
}

void bm_conv_parallel(benchmark::State& state) {
  const auto hw = state.range(0);
  kern::Conv2dShape s{8, 16, hw, hw, 16, 3, 3, 1, 1};
  Tensor x = random_tensor({8, 16, hw, hw}, 3);
  Tensor w = random_tensor({16, 16, 3, 3}, 4);
  Tensor b = random_tensor({16}, 5);
  Tensor y({8, 16, s.oh(), s.ow()});
  for (auto _ : state) {
    kern::conv2d_forward_parallel(s, x.data(), w.data(), b.data(), y.data());
    benchmark::ClobberMemory();
  }
}

void bm_bilinear_serial(benchmark::State& state) {
  const auto m = state.range(0);
  Tensor f = random_tensor({48, 64, 64}, 6);
  Tensor p = random_tensor({m, 2}, 7);
  for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = (p[i] + 1.0) * 31.0;
  Tensor out({m, 48});
  for (auto _ : state) {
    kern::bilinear_gather_serial(48, 64, 64, f.data(), m, p.data(), out.data());
    benchmark::ClobberMemory();
  }
}

void bm_bilinear_parallel(benchmark::State& state) {
  const auto m = state.range(0);
  Tensor f = random_tensor({48, 64, 64}, 6);
  Tensor p = random_tensor({m, 2}, 7);
  for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = (p[i] + 1.0) * 31.0;
  Tensor out({m, 48});
  for (auto _ : state) {
    kern::bilinear_gather_parallel(48, 64, 64, f.data(), m, p.data(), out.data());
    benchmark::ClobberMemory();
  }
}

}  // namespace

BENCHMARK(bm_gemm_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_gemm_parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_conv_serial)->Arg(32)->Arg(64);
BENCHMARK(bm_conv_parallel)->Arg(32)->Arg(64);
BENCHMARK(bm_bilinear_serial)->Arg(1024)->Arg(8192);
BENCHMARK(bm_bilinear_parallel)->Arg(1024)->Arg(8192);

BENCHMARK_MAIN();
