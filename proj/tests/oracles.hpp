// Test-only reference implementations. These stay deliberately naive and
// independent of the library's kernels: direct quadruple-loop summation in
// double, scatter-accumulate transpose, and a central-difference gradient
// probe. Production code must never include this header.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "vesselforge/tensor.hpp"

namespace oracle {

using std::int64_t;

struct ConvSpec {
  int stride = 1, padding = 0, dilation = 1;
};

// Direct dilated cross-correlation, double accumulation, no cleverness.
template <class T>
std::vector<double> conv2d_naive(const std::vector<T>& x, int64_t N, int64_t C, int64_t H,
                                 int64_t W, const std::vector<T>& w, int64_t F, int64_t kh,
                                 int64_t kw, const std::vector<T>& bias, ConvSpec s,
                                 int64_t& OH, int64_t& OW) {
  OH = (H + 2 * s.padding - (s.dilation * (kh - 1) + 1)) / s.stride + 1;
  OW = (W + 2 * s.padding - (s.dilation * (kw - 1) + 1)) / s.stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N * F * OH * OW), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[static_cast<std::size_t>(f)]);
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * s.stride - s.padding + ky * s.dilation;
                const int64_t ix = ox * s.stride - s.padding + kx * s.dilation;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += static_cast<double>(x[static_cast<std::size_t>(((n * C + c) * H + iy) * W + ix)]) *
                       static_cast<double>(w[static_cast<std::size_t>(((f * C + c) * kh + ky) * kw + kx)]);
              }
          out[static_cast<std::size_t>(((n * F + f) * OH + oy) * OW + ox)] = acc;
        }
  return out;
}

// Scatter-accumulate transposed convolution; weight laid out [C,F,kh,kw].
template <class T>
std::vector<double> conv_transpose2d_naive(const std::vector<T>& x, int64_t N, int64_t C,
                                           int64_t H, int64_t W, const std::vector<T>& w,
                                           int64_t F, int64_t kh, int64_t kw,
                                           const std::vector<T>& bias, int stride,
                                           int padding, int64_t& OH, int64_t& OW) {
  OH = (H - 1) * stride - 2 * padding + kh;
  OW = (W - 1) * stride - 2 * padding + kw;
  std::vector<double> out(static_cast<std::size_t>(N * F * OH * OW), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < F; ++f) {
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox)
          out[static_cast<std::size_t>(((n * F + f) * OH + oy) * OW + ox)] =
              bias.empty() ? 0.0 : static_cast<double>(bias[static_cast<std::size_t>(f)]);
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t oy = y * stride - padding + ky;
                const int64_t ox = xx * stride - padding + kx;
                if (oy < 0 || oy >= OH || ox < 0 || ox >= OW) continue;
                out[static_cast<std::size_t>(((n * F + f) * OH + oy) * OW + ox)] +=
                    static_cast<double>(x[static_cast<std::size_t>(((n * C + c) * H + y) * W + xx)]) *
                    static_cast<double>(w[static_cast<std::size_t>(((c * F + f) * kh + ky) * kw + kx)]);
              }
    }
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central finite differences against reverse-mode gradients for every element
// of every listed parameter. `fn` must rebuild its graph per call and be
// deterministic. Wide-scalar (double) tensors only.
inline GradCheckResult gradcheck(const std::function<vesselforge::TensorT<double>()>& fn,
                                 std::vector<vesselforge::TensorT<double>> params,
                                 double step = 1e-4) {
  using vesselforge::backward;
  for (auto& p : params) p.zero_grad();
  auto loss = fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.data().size(), 0.0));
  }
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& val = params[pi].data();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double keep = val[i];
      val[i] = keep + step;
      const double f_plus = fn().item();
      val[i] = keep - step;
      const double f_minus = fn().item();
      val[i] = keep;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_rel_error) res.max_rel_error = rel;
      ++res.checked;
    }
  }
  return res;
}

}  // namespace oracle
