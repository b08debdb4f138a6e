// Serial reference vs OpenMP kernels on the shapes the default model trains with.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cade/kernels.hpp"

namespace k = cade::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// batch 32; layer 0: 1 -> 8 on 20x32, layer 1: 8 -> 16 on 10x16, layer 2: 16 -> 32 on 5x8
k::ConvGeometry layer(int i) {
  static const std::size_t c[] = {1, 8, 16, 32}, h[] = {20, 10, 5}, w[] = {32, 16, 8};
  return {32, c[i], h[i], w[i], c[i + 1], 3, 3, 1, 1};
}

struct Buffers {
  k::ConvGeometry g;
  std::vector<double> in, weight, bias, out, grad_in, grad_w;
  explicit Buffers(const k::ConvGeometry& geom)
      : g(geom),
        in(noise(g.batch * g.in_channels * g.in_h * g.in_w, 1)),
        weight(noise(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w, 2)),
        bias(noise(g.out_channels, 3)),
        out(noise(g.batch * g.out_channels * g.out_h() * g.out_w(), 4)),
        grad_in(in.size()),
        grad_w(weight.size()) {}
};

template <bool Omp>
void conv_forward(benchmark::State& st) {
  Buffers b(layer(static_cast<int>(st.range(0))));
  std::vector<double> out(b.out.size());
  for (auto _ : st) {
    if constexpr (Omp) k::openmp::conv2d_forward(b.g, b.in.data(), b.weight.data(), b.bias.data(), out.data());
    else k::serial::conv2d_forward(b.g, b.in.data(), b.weight.data(), b.bias.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Omp>
void conv_backward_input(benchmark::State& st) {
  Buffers b(layer(static_cast<int>(st.range(0))));
  for (auto _ : st) {
    if constexpr (Omp) k::openmp::conv2d_backward_input(b.g, b.out.data(), b.weight.data(), b.grad_in.data());
    else k::serial::conv2d_backward_input(b.g, b.out.data(), b.weight.data(), b.grad_in.data());
    benchmark::DoNotOptimize(b.grad_in.data());
  }
}

template <bool Omp>
void conv_backward_weight(benchmark::State& st) {
  Buffers b(layer(static_cast<int>(st.range(0))));
  for (auto _ : st) {
    if constexpr (Omp) k::openmp::conv2d_backward_weight(b.g, b.out.data(), b.in.data(), b.grad_w.data());
    else k::serial::conv2d_backward_weight(b.g, b.out.data(), b.in.data(), b.grad_w.data());
    benchmark::DoNotOptimize(b.grad_w.data());
  }
}

template <bool Omp>
void matmul(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  auto a = noise(n * n, 5), b = noise(n * n, 6);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Omp) k::openmp::matmul(n, n, n, a.data(), b.data(), c.data());
    else k::serial::matmul(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * n * n));
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial")->DenseRange(0, 2);
BENCHMARK(conv_forward<true>)->Name("conv_forward/openmp")->DenseRange(0, 2);
BENCHMARK(conv_backward_input<false>)->Name("conv_backward_input/serial")->DenseRange(0, 2);
BENCHMARK(conv_backward_input<true>)->Name("conv_backward_input/openmp")->DenseRange(0, 2);
BENCHMARK(conv_backward_weight<false>)->Name("conv_backward_weight/serial")->DenseRange(0, 2);
BENCHMARK(conv_backward_weight<true>)->Name("conv_backward_weight/openmp")->DenseRange(0, 2);
BENCHMARK(matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(matmul<true>)->Name("matmul/openmp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
