// Rough throughput probe for the convolution kernels; not part of the test
// suite. Prints MAC rates for shapes matching the desk-scale training run.

#include <chrono>
#include <cstdio>

#include "vesselforge/adam.hpp"
#include "vesselforge/ops.hpp"

using namespace vesselforge;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void bench_conv(int n, int c, int f, int hw, int k, int stride, int pad, int dil, int reps) {
  Pcg32 rng(7);
  auto x = Tensor::randn({n, c, hw, hw}, rng, 0.f, 1.f, true);
  auto w = Tensor::randn({f, c, k, k}, rng, 0.f, 0.1f, true);
  auto b = Tensor::zeros({f}, true);
  OpCounter::reset();
  auto t0 = std::chrono::steady_clock::now();
  Tensor out;
  for (int i = 0; i < reps; ++i) out = conv2d(x, w, b, stride, pad, dil);
  const double fwd = seconds_since(t0);
  const double macs = static_cast<double>(OpCounter::macs());
  t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) {
    auto loss = mean_all(conv2d(x, w, b, stride, pad, dil));
    backward(loss);
  }
  const double fwdbwd = seconds_since(t0);
  std::printf("conv %dx%dx%dx%d k%d s%d d%d: fwd %.1f GMAC/s, fwd+bwd %.1f it/s\n", n, c, hw,
              hw, k, stride, dil, macs / fwd * 1e-9, reps / fwdbwd);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", max_threads());
  bench_conv(2, 8, 8, 128, 4, 2, 1, 1, 20);   // widest encoder conv, desk scale
  bench_conv(2, 16, 16, 64, 4, 2, 1, 1, 20);
  bench_conv(2, 8, 8, 128, 3, 1, 1, 1, 20);   // factorized-block shape (dense probe)
  bench_conv(2, 64, 64, 16, 4, 2, 1, 1, 20);
  return 0;
}
