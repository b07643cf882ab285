// Benchmark comparing the OpenMP kernels against the naive serial
// references. With one hardware thread the interesting column is the
// FFT-vs-direct-DFT row; the others show the threading speedup.

#include <chrono>
#include <complex>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "bsm/dsp.hpp"
#include "bsm/kernels.hpp"
#include "bsm/rng.hpp"

using namespace bsm;
using kernels::ScanDims;
using kernels::Trans;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() /
         double(reps);
}

std::vector<double> randu(std::mt19937_64& g, size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng::uniform(g, -1.0, 1.0);
  return v;
}

void row(const char* name, double serial_ms, double parallel_ms) {
  std::printf("%-28s %10.3f ms %10.3f ms %8.2fx\n", name, serial_ms,
              parallel_ms, serial_ms / parallel_ms);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without openmp\n");
#endif
  std::printf("%-28s %13s %13s %9s\n", "kernel", "serial", "parallel",
              "speedup");

  std::mt19937_64 g(1);

  {
    const int64_t m = 192, n = 192, k = 192;
    auto a = randu(g, size_t(m * k));
    auto b = randu(g, size_t(k * n));
    std::vector<double> c(size_t(m * n));
    row("gemm 192^3",
        time_ms([&] {
          kernels::serial::gemm(Trans::N, Trans::N, m, n, k, a.data(),
                                b.data(), c.data(), false);
        }, 5),
        time_ms([&] {
          kernels::gemm(Trans::N, Trans::N, m, n, k, a.data(), b.data(),
                        c.data(), false);
        }, 5));
  }
  {
    const int64_t n = 4'000'000;
    auto x = randu(g, size_t(n));
    std::vector<double> y(size_t(n));
    row("tanh 4e6",
        time_ms([&] {
          kernels::serial::unary_forward(kernels::Unary::Tanh, n, x.data(),
                                         y.data());
        }, 3),
        time_ms([&] {
          kernels::unary_forward(kernels::Unary::Tanh, n, x.data(), y.data());
        }, 3));
  }
  {
    const int64_t n = 4'000'000;
    auto x = randu(g, size_t(n));
    volatile double sink = 0.0;
    row("abs-sum 4e6",
        time_ms([&] { sink = kernels::serial::abs_sum_all(n, x.data()); }, 5),
        time_ms([&] { sink = kernels::abs_sum_all(n, x.data()); }, 5));
    (void)sink;
  }
  {
    ScanDims d{8, 4096, 32, 2, 16};
    auto v = randu(g, size_t(d.s * d.t * d.ch));
    auto delta = randu(g, size_t(d.s * d.t * d.h));
    for (auto& x : delta) x = 0.05 + 0.5 * std::abs(x);
    auto b = randu(g, size_t(d.s * d.t * d.h * d.n));
    auto c = randu(g, size_t(d.s * d.t * d.h * d.n));
    std::vector<double> a{-0.5, -0.9};
    std::vector<double> y(v.size());
    row("scan 8x4096x32 (n=16)",
        time_ms([&] {
          kernels::serial::scan_forward(d, v.data(), delta.data(), b.data(),
                                        c.data(), a.data(), y.data());
        }, 3),
        time_ms([&] {
          kernels::scan_forward(d, v.data(), delta.data(), b.data(), c.data(),
                                a.data(), y.data(), nullptr);
        }, 3));
  }
  {
    // FFT vs direct DFT on the analysis front end (5 s @ 44.1 kHz)
    const int window = 2048, hop = 441;
    const int64_t n = 5 * 44100;
    auto x = randu(g, size_t(n));
    const auto win = dsp::hann_window(window);
    const int64_t frames = dsp::stft_frames(n, hop);
    const int64_t bins = window / 2 + 1;
    std::vector<std::complex<double>> out(size_t(bins));
    row("stft 5s/44.1k (one frame)",
        time_ms([&] {
          std::vector<double> fr(size_t(window));
          for (int j = 0; j < window; ++j)
            fr[size_t(j)] = x[size_t(j)] * win[size_t(j)];
          kernels::serial::real_dft(window, bins, fr.data(), out.data());
        }, 3),
        time_ms([&] {
          auto spec = dsp::stft(x, window, hop, 44100);
          (void)spec;
        }, 3) / double(frames));
  }
  return 0;
}
