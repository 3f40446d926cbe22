#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vesselforge/common.hpp"
#include "vesselforge/rng.hpp"
#include "vesselforge/tensor.hpp"

// Tensor operations with forward values and reverse-mode closures.
//
// Every backward pass is written as a gather: each gradient element is owned
// by exactly one loop iteration and reduced in a fixed order, which keeps
// results bit-identical regardless of how parallel_for slices the work.
// Inner products accumulate in double independent of the scalar type.

namespace vesselforge {

namespace detail {

inline void check_rank4(const char* op, const std::vector<std::int64_t>& s) {
  if (s.size() != 4) {
    throw ShapeError(msg(op, ": expected 4-d (N,C,H,W) tensor, got rank ", s.size()));
  }
}

template <class T>
std::int64_t conv_out_extent(const char* op, const char* axis, std::int64_t in,
                             std::int64_t k, std::int64_t stride, std::int64_t padding,
                             std::int64_t dilation) {
  const std::int64_t eff = dilation * (k - 1) + 1;
  if (in + 2 * padding < eff) {
    throw ShapeError(msg(op, ": ", axis, " extent ", in, " with padding ", padding,
                         " is smaller than the dilated kernel footprint ", eff));
  }
  return (in + 2 * padding - eff) / stride + 1;
}

// Output index range [begin,end) for which the input index o*stride-padding+tap
// stays inside [0,in). Hoisting this out of the kernels removes all inner-loop
// bounds checks.
struct TapRange {
  std::int64_t begin, end;
};
inline TapRange tap_range(std::int64_t out, std::int64_t in, std::int64_t stride,
                          std::int64_t padding, std::int64_t tap) {
  const std::int64_t lo = padding - tap;
  std::int64_t begin = lo <= 0 ? 0 : (lo + stride - 1) / stride;
  const std::int64_t hi = in - 1 - tap + padding;  // last admissible o*stride
  std::int64_t end = hi < 0 ? 0 : hi / stride + 1;
  if (end > out) end = out;
  if (begin > end) begin = end;
  return {begin, end};
}

}  // namespace detail

// ----------------------------------------------------------------------------
// conv2d: dilated cross-correlation. input [N,C,H,W], weight [F,C,kh,kw],
// bias [F] (optional; pass a default-constructed tensor for none).
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride, int padding, int dilation = 1) {
  detail::check_rank4("conv2d", input.shape());
  detail::check_rank4("conv2d weight", weight.shape());
  if (stride < 1 || padding < 0 || dilation < 1) {
    throw ValueError(detail::msg("conv2d: invalid stride/padding/dilation ", stride, "/",
                                 padding, "/", dilation));
  }
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t F = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != C) {
    throw ShapeError(detail::msg("conv2d: input channel axis ", C,
                                 " does not match weight channel axis ", weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != F)) {
    throw ShapeError(detail::msg("conv2d: bias axis ", bias.defined() ? bias.dim(0) : 0,
                                 " does not match filter axis ", F));
  }
  const std::int64_t OH = detail::conv_out_extent<T>("conv2d", "height", H, kh, stride, padding, dilation);
  const std::int64_t OW = detail::conv_out_extent<T>("conv2d", "width", W, kw, stride, padding, dilation);
  OpCounter::add(static_cast<std::uint64_t>(N * F * OH * OW) *
                 static_cast<std::uint64_t>(C * kh * kw));

  std::vector<T> out(static_cast<std::size_t>(N * F * OH * OW));
  const T* xv = input.data().data();
  const T* wv = weight.data().data();
  const T* bv = bias.defined() ? bias.data().data() : nullptr;
  T* ov = out.data();

  // Each (n,f) plane is owned by one worker and accumulated into a double
  // scratch plane in a fixed (c,ky,kx) order; inner loops run over
  // precomputed in-bounds ranges.
  const std::int64_t plane_work = OH * OW * C * kh * kw;
  const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, plane_work));
  parallel_for(N * F, [&](std::int64_t b, std::int64_t e) {
    std::vector<double> acc(static_cast<std::size_t>(OH * OW));
    for (std::int64_t nf = b; nf < e; ++nf) {
      const std::int64_t n = nf / F, f = nf % F;
      const double bias_f = bv ? static_cast<double>(bv[f]) : 0.0;
      for (auto& v : acc) v = bias_f;
      for (std::int64_t c = 0; c < C; ++c) {
        const T* xplane = xv + ((n * C + c) * H) * W;
        const T* wplane = wv + ((f * C + c) * kh) * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const auto ry = detail::tap_range(OH, H, stride, padding, ky * dilation);
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const auto rx = detail::tap_range(OW, W, stride, padding, kx * dilation);
            const double wt = static_cast<double>(wplane[ky * kw + kx]);
            for (std::int64_t oy = ry.begin; oy < ry.end; ++oy) {
              const T* xrow = xplane + (oy * stride - padding + ky * dilation) * W - padding +
                              kx * dilation;
              double* orow = acc.data() + oy * OW;
              if (stride == 1) {
                for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                  orow[ox] += wt * static_cast<double>(xrow[ox]);
              } else {
                for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                  orow[ox] += wt * static_cast<double>(xrow[ox * stride]);
              }
            }
          }
        }
      }
      T* out_plane = ov + nf * OH * OW;
      for (std::int64_t i = 0; i < OH * OW; ++i) out_plane[i] = static_cast<T>(acc[i]);
    }
  }, grain);

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto bw = [xn, wn, bn, N, C, H, W, F, kh, kw, OH, OW, stride, padding,
             dilation](NodeT<T>& node) {
    const T* go = node.grad.data();
    const T* xv = xn->value.data();
    const T* wv = wn->value.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, H * W * F * kh * kw));
      parallel_for(N * C, [&](std::int64_t b, std::int64_t e) {
        std::vector<double> acc(static_cast<std::size_t>(H * W));
        for (std::int64_t nc = b; nc < e; ++nc) {
          const std::int64_t n = nc / C, c = nc % C;
          for (auto& v : acc) v = 0.0;
          for (std::int64_t f = 0; f < F; ++f) {
            const T* go_plane = go + ((n * F + f) * OH) * OW;
            const T* wplane = wv + ((f * C + c) * kh) * kw;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const auto ry = detail::tap_range(OH, H, stride, padding, ky * dilation);
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto rx = detail::tap_range(OW, W, stride, padding, kx * dilation);
                const double wt = static_cast<double>(wplane[ky * kw + kx]);
                for (std::int64_t oy = ry.begin; oy < ry.end; ++oy) {
                  double* gxrow = acc.data() + (oy * stride - padding + ky * dilation) * W -
                                  padding + kx * dilation;
                  const T* gorow = go_plane + oy * OW;
                  if (stride == 1) {
                    for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                      gxrow[ox] += wt * static_cast<double>(gorow[ox]);
                  } else {
                    for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                      gxrow[ox * stride] += wt * static_cast<double>(gorow[ox]);
                  }
                }
              }
            }
          }
          T* gx_plane = gx + nc * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) gx_plane[i] += static_cast<T>(acc[i]);
        }
      }, grain);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* gw = wn->grad.data();
      const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, kh * kw * N * OH * OW));
      parallel_for(F * C, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t fc = b; fc < e; ++fc) {
          const std::int64_t f = fc / C, c = fc % C;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const auto ry = detail::tap_range(OH, H, stride, padding, ky * dilation);
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto rx = detail::tap_range(OW, W, stride, padding, kx * dilation);
              double acc = 0.0;
              for (std::int64_t n = 0; n < N; ++n) {
                const T* xplane = xv + ((n * C + c) * H) * W;
                const T* go_plane = go + ((n * F + f) * OH) * OW;
                for (std::int64_t oy = ry.begin; oy < ry.end; ++oy) {
                  const T* xrow = xplane + (oy * stride - padding + ky * dilation) * W -
                                  padding + kx * dilation;
                  const T* gorow = go_plane + oy * OW;
                  T dot = T(0);
                  if (stride == 1) {
                    for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                      dot += xrow[ox] * gorow[ox];
                  } else {
                    for (std::int64_t ox = rx.begin; ox < rx.end; ++ox)
                      dot += xrow[ox * stride] * gorow[ox];
                  }
                  acc += static_cast<double>(dot);
                }
              }
              gw[(fc * kh + ky) * kw + kx] += static_cast<T>(acc);
            }
          }
        }
      }, grain);
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      for (std::int64_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* go_plane = go + ((n * F + f) * OH) * OW;
          for (std::int64_t i = 0; i < OH * OW; ++i) acc += static_cast<double>(go_plane[i]);
        }
        gb[f] += static_cast<T>(acc);
      }
    }
  };
  return detail::make_op<T>({N, F, OH, OW}, std::move(out), {input, weight, bias}, std::move(bw));
}

// ----------------------------------------------------------------------------
// conv_transpose2d: adjoint of conv2d used as a forward map. input [N,C,H,W],
// weight [C,F,kh,kw], output [N,F,(H-1)s-2p+kh,(W-1)s-2p+kw]. Computed as a
// gather over output sites.
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& input, const TensorT<T>& weight,
                            const TensorT<T>& bias, int stride, int padding) {
  detail::check_rank4("conv_transpose2d", input.shape());
  detail::check_rank4("conv_transpose2d weight", weight.shape());
  if (stride < 1 || padding < 0) {
    throw ValueError(detail::msg("conv_transpose2d: invalid stride/padding ", stride, "/", padding));
  }
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t F = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != C) {
    throw ShapeError(detail::msg("conv_transpose2d: input channel axis ", C,
                                 " does not match weight channel axis ", weight.dim(0)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != F)) {
    throw ShapeError(detail::msg("conv_transpose2d: bias axis ",
                                 bias.defined() ? bias.dim(0) : 0,
                                 " does not match filter axis ", F));
  }
  const std::int64_t OH = (H - 1) * stride - 2 * padding + kh;
  const std::int64_t OW = (W - 1) * stride - 2 * padding + kw;
  if (OH <= 0 || OW <= 0) {
    throw ShapeError(detail::msg("conv_transpose2d: computed output extent ", OH, "x", OW,
                                 " is not positive"));
  }
  OpCounter::add(static_cast<std::uint64_t>(N * C * H * W) *
                 static_cast<std::uint64_t>(F * kh * kw));

  std::vector<T> out(static_cast<std::size_t>(N * F * OH * OW));
  const T* xv = input.data().data();
  const T* wv = weight.data().data();
  const T* bv = bias.defined() ? bias.data().data() : nullptr;
  T* ov = out.data();

  // Scatter formulation with per-(n,f) plane ownership: input site (y,x)
  // contributes to output row y*stride-padding+ky in a fixed (c,ky,kx) order.
  const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, OH * OW * C * kh * kw));
  parallel_for(N * F, [&](std::int64_t b, std::int64_t e) {
    std::vector<double> acc(static_cast<std::size_t>(OH * OW));
    for (std::int64_t nf = b; nf < e; ++nf) {
      const std::int64_t n = nf / F, f = nf % F;
      const double bias_f = bv ? static_cast<double>(bv[f]) : 0.0;
      for (auto& v : acc) v = bias_f;
      for (std::int64_t c = 0; c < C; ++c) {
        const T* xplane = xv + ((n * C + c) * H) * W;
        const T* wplane = wv + ((c * F + f) * kh) * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const auto ry = detail::tap_range(H, OH, stride, padding, ky);
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const auto rx = detail::tap_range(W, OW, stride, padding, kx);
            const double wt = static_cast<double>(wplane[ky * kw + kx]);
            for (std::int64_t y = ry.begin; y < ry.end; ++y) {
              const T* xrow = xplane + y * W;
              double* orow = acc.data() + (y * stride - padding + ky) * OW - padding + kx;
              if (stride == 1) {
                for (std::int64_t x = rx.begin; x < rx.end; ++x)
                  orow[x] += wt * static_cast<double>(xrow[x]);
              } else {
                for (std::int64_t x = rx.begin; x < rx.end; ++x)
                  orow[x * stride] += wt * static_cast<double>(xrow[x]);
              }
            }
          }
        }
      }
      T* out_plane = ov + nf * OH * OW;
      for (std::int64_t i = 0; i < OH * OW; ++i) out_plane[i] = static_cast<T>(acc[i]);
    }
  }, grain);

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto bw = [xn, wn, bn, N, C, H, W, F, kh, kw, OH, OW, stride, padding](NodeT<T>& node) {
    const T* go = node.grad.data();
    const T* xv = xn->value.data();
    const T* wv = wn->value.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, H * W * F * kh * kw));
      parallel_for(N * C, [&](std::int64_t b, std::int64_t e) {
        std::vector<double> acc(static_cast<std::size_t>(H * W));
        for (std::int64_t nc = b; nc < e; ++nc) {
          const std::int64_t n = nc / C, c = nc % C;
          for (auto& v : acc) v = 0.0;
          for (std::int64_t f = 0; f < F; ++f) {
            const T* go_plane = go + ((n * F + f) * OH) * OW;
            const T* wplane = wv + ((c * F + f) * kh) * kw;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const auto ry = detail::tap_range(H, OH, stride, padding, ky);
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto rx = detail::tap_range(W, OW, stride, padding, kx);
                const double wt = static_cast<double>(wplane[ky * kw + kx]);
                for (std::int64_t y = ry.begin; y < ry.end; ++y) {
                  double* gxrow = acc.data() + y * W;
                  const T* gorow = go_plane + (y * stride - padding + ky) * OW - padding + kx;
                  if (stride == 1) {
                    for (std::int64_t x = rx.begin; x < rx.end; ++x)
                      gxrow[x] += wt * static_cast<double>(gorow[x]);
                  } else {
                    for (std::int64_t x = rx.begin; x < rx.end; ++x)
                      gxrow[x] += wt * static_cast<double>(gorow[x * stride]);
                  }
                }
              }
            }
          }
          T* gx_plane = gx + nc * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) gx_plane[i] += static_cast<T>(acc[i]);
        }
      }, grain);
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* gw = wn->grad.data();
      const std::int64_t grain = std::max<std::int64_t>(1, 65536 / std::max<std::int64_t>(1, kh * kw * N * H * W));
      parallel_for(C * F, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t cf = b; cf < e; ++cf) {
          const std::int64_t c = cf / F, f = cf % F;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const auto ry = detail::tap_range(H, OH, stride, padding, ky);
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto rx = detail::tap_range(W, OW, stride, padding, kx);
              double acc = 0.0;
              for (std::int64_t n = 0; n < N; ++n) {
                const T* xplane = xv + ((n * C + c) * H) * W;
                const T* go_plane = go + ((n * F + f) * OH) * OW;
                for (std::int64_t y = ry.begin; y < ry.end; ++y) {
                  const T* xrow = xplane + y * W;
                  const T* gorow = go_plane + (y * stride - padding + ky) * OW - padding + kx;
                  T dot = T(0);
                  if (stride == 1) {
                    for (std::int64_t x = rx.begin; x < rx.end; ++x) dot += xrow[x] * gorow[x];
                  } else {
                    for (std::int64_t x = rx.begin; x < rx.end; ++x)
                      dot += xrow[x] * gorow[x * stride];
                  }
                  acc += static_cast<double>(dot);
                }
              }
              gw[(cf * kh + ky) * kw + kx] += static_cast<T>(acc);
            }
          }
        }
      }, grain);
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      for (std::int64_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* go_plane = go + ((n * F + f) * OH) * OW;
          for (std::int64_t i = 0; i < OH * OW; ++i) acc += static_cast<double>(go_plane[i]);
        }
        gb[f] += static_cast<T>(acc);
      }
    }
  };
  return detail::make_op<T>({N, F, OH, OW}, std::move(out), {input, weight, bias}, std::move(bw));
}

// ----------------------------------------------------------------------------
// adaptive_avg_pool2d: bin i spans [floor(i*H/out), ceil((i+1)*H/out)); bins
// may overlap for non-divisible extents.
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> adaptive_avg_pool2d(const TensorT<T>& input, int out_h, int out_w) {
  detail::check_rank4("adaptive_avg_pool2d", input.shape());
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError(detail::msg("adaptive_avg_pool2d: output extent ", out_h, "x", out_w,
                                 " must be positive"));
  }
  if (out_h > H || out_w > W) {
    throw ShapeError(detail::msg("adaptive_avg_pool2d: output ", out_h, "x", out_w,
                                 " exceeds input ", H, "x", W));
  }
  auto bin_start = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
  auto bin_end = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return ((i + 1) * in + out - 1) / out;
  };

  std::vector<T> out(static_cast<std::size_t>(N * C * out_h * out_w));
  const T* xv = input.data().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xv + nc * H * W;
    T* oplane = out.data() + nc * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const std::int64_t y0 = bin_start(i, H, out_h), y1 = bin_end(i, H, out_h);
      for (std::int64_t j = 0; j < out_w; ++j) {
        const std::int64_t x0 = bin_start(j, W, out_w), x1 = bin_end(j, W, out_w);
        double acc = 0.0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t x = x0; x < x1; ++x) acc += static_cast<double>(plane[y * W + x]);
        oplane[i * out_w + j] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }

  auto xn = input.node();
  const std::int64_t oh = out_h, ow = out_w;
  auto bw = [xn, N, C, H, W, oh, ow, bin_start, bin_end](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    T* gx = xn->grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T* gplane = go + nc * oh * ow;
      T* gx_plane = gx + nc * H * W;
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < oh; ++i) {
            const std::int64_t y0 = bin_start(i, H, oh), y1 = bin_end(i, H, oh);
            if (y < y0 || y >= y1) continue;
            for (std::int64_t j = 0; j < ow; ++j) {
              const std::int64_t x0 = bin_start(j, W, ow), x1 = bin_end(j, W, ow);
              if (x < x0 || x >= x1) continue;
              acc += static_cast<double>(gplane[i * ow + j]) /
                     static_cast<double>((y1 - y0) * (x1 - x0));
            }
          }
          gx_plane[y * W + x] += static_cast<T>(acc);
        }
      }
    }
  };
  return detail::make_op<T>({N, C, out_h, out_w}, std::move(out), {input}, std::move(bw));
}

/// Per-channel spatial mean; returns [N,C].
template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  detail::check_rank4("global_avg_pool", input.shape());
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  std::vector<T> out(static_cast<std::size_t>(N * C));
  const T* xv = input.data().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const T* plane = xv + nc * H * W;
    for (std::int64_t i = 0; i < H * W; ++i) acc += static_cast<double>(plane[i]);
    out[static_cast<std::size_t>(nc)] = static_cast<T>(acc / static_cast<double>(H * W));
  }
  auto xn = input.node();
  auto bw = [xn, N, C, H, W](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    T* gx = xn->grad.data();
    const T inv = static_cast<T>(1.0 / static_cast<double>(H * W));
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T g = go[nc] * inv;
      T* plane = gx + nc * H * W;
      for (std::int64_t i = 0; i < H * W; ++i) plane[i] += g;
    }
  };
  return detail::make_op<T>({N, C}, std::move(out), {input}, std::move(bw));
}

// ----------------------------------------------------------------------------
// upsample_bilinear: align_corners=false sampling (source coordinate
// (o+0.5)*in/out - 0.5, clamped).
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> upsample_bilinear(const TensorT<T>& input, int out_h, int out_w) {
  detail::check_rank4("upsample_bilinear", input.shape());
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError(detail::msg("upsample_bilinear: output extent ", out_h, "x", out_w,
                                 " must be positive"));
  }
  struct Taps {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> frac;
  };
  auto make_taps = [](std::int64_t in, std::int64_t out) {
    Taps t;
    t.i0.resize(out); t.i1.resize(out); t.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      std::int64_t i0 = static_cast<std::int64_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      t.i0[o] = i0;
      t.i1[o] = std::min<std::int64_t>(i0 + 1, in - 1);
      t.frac[o] = src - static_cast<double>(i0);
    }
    return t;
  };
  const Taps ty = make_taps(H, out_h);
  const Taps tx = make_taps(W, out_w);

  std::vector<T> out(static_cast<std::size_t>(N * C * out_h * out_w));
  const T* xv = input.data().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xv + nc * H * W;
    T* oplane = out.data() + nc * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const std::int64_t y0 = ty.i0[oy], y1 = ty.i1[oy];
      const double fy = ty.frac[oy];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const std::int64_t x0 = tx.i0[ox], x1 = tx.i1[ox];
        const double fx = tx.frac[ox];
        const double v =
            (1.0 - fy) * ((1.0 - fx) * plane[y0 * W + x0] + fx * plane[y0 * W + x1]) +
            fy * ((1.0 - fx) * plane[y1 * W + x0] + fx * plane[y1 * W + x1]);
        oplane[oy * out_w + ox] = static_cast<T>(v);
      }
    }
  }

  auto xn = input.node();
  const std::int64_t oh = out_h, ow = out_w;
  auto bw = [xn, N, C, H, W, oh, ow, ty, tx](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    T* gx = xn->grad.data();
    // Scatter with one owner thread per (n,c) plane.
    parallel_for(N * C, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t nc = b; nc < e; ++nc) {
        const T* gplane = go + nc * oh * ow;
        T* gx_plane = gx + nc * H * W;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t y0 = ty.i0[oy], y1 = ty.i1[oy];
          const double fy = ty.frac[oy];
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t x0 = tx.i0[ox], x1 = tx.i1[ox];
            const double fx = tx.frac[ox];
            const double g = static_cast<double>(gplane[oy * ow + ox]);
            gx_plane[y0 * W + x0] += static_cast<T>((1.0 - fy) * (1.0 - fx) * g);
            gx_plane[y0 * W + x1] += static_cast<T>((1.0 - fy) * fx * g);
            gx_plane[y1 * W + x0] += static_cast<T>(fy * (1.0 - fx) * g);
            gx_plane[y1 * W + x1] += static_cast<T>(fy * fx * g);
          }
        }
      }
    }, std::max<std::int64_t>(1, 16384 / std::max<std::int64_t>(1, oh * ow)));
  };
  return detail::make_op<T>({N, C, out_h, out_w}, std::move(out), {input}, std::move(bw));
}

// ----------------------------------------------------------------------------
// Activations.
// ----------------------------------------------------------------------------

enum class ActKind { kRelu, kLeakyRelu, kSigmoid, kTanh };

template <class T>
TensorT<T> leaky_relu(const TensorT<T>& x, T slope) {
  if (!std::isfinite(static_cast<double>(slope))) {
    throw ValueError("leaky_relu: slope must be finite");
  }
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  auto xn = x.node();
  auto bw = [xn, slope](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    const T* xv = xn->value.data();
    T* gx = xn->grad.data();
    for (std::size_t i = 0; i < node.value.size(); ++i) {
      gx[i] += xv[i] > T(0) ? go[i] : slope * go[i];
    }
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bw));
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return leaky_relu(x, T(0));
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    out[i] = static_cast<T>(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                     : std::exp(v) / (1.0 + std::exp(v)));
  }
  auto xn = x.node();
  auto bw = [xn](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    const T* y = node.value.data();
    T* gx = xn->grad.data();
    for (std::size_t i = 0; i < node.value.size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bw));
}

template <class T>
TensorT<T> tanh_act(const TensorT<T>& x) {
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(std::tanh(static_cast<double>(xv[i])));
  auto xn = x.node();
  auto bw = [xn](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    const T* y = node.value.data();
    T* gx = xn->grad.data();
    for (std::size_t i = 0; i < node.value.size(); ++i) gx[i] += go[i] * (T(1) - y[i] * y[i]);
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bw));
}

template <class T>
TensorT<T> activation(const TensorT<T>& x, ActKind kind, T slope = T(0.2)) {
  switch (kind) {
    case ActKind::kRelu: return relu(x);
    case ActKind::kLeakyRelu: return leaky_relu(x, slope);
    case ActKind::kSigmoid: return sigmoid(x);
    case ActKind::kTanh: return tanh_act(x);
  }
  throw ValueError("activation: unknown kind");
}

// ----------------------------------------------------------------------------
// batchnorm2d. Train mode normalizes with batch statistics (biased variance)
// and updates running stats in place: r <- (1-momentum)*r + momentum*stat,
// with the unbiased variance entering the running buffer. Eval mode uses the
// running stats.
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       TensorT<T>& running_mean, TensorT<T>& running_var, Mode mode,
                       double momentum = 0.1, double eps = 1e-5) {
  detail::check_rank4("batchnorm2d", x.shape());
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (eps <= 0.0) {
    throw ValueError(detail::msg("batchnorm2d: eps must be positive (division guard), got ", eps));
  }
  for (const TensorT<T>* t :
       std::initializer_list<const TensorT<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw ShapeError(detail::msg("batchnorm2d: parameter axis ", t->dim(0),
                                   " does not match channel axis ", C));
    }
  }
  const std::int64_t m = N * H * W;
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();

  std::vector<double> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (mode == Mode::kTrain) {
    T* rm = running_mean.data().data();
    T* rv = running_var.data().data();
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* plane = xv + ((n * C + c) * H) * W;
        for (std::int64_t i = 0; i < H * W; ++i) s += static_cast<double>(plane[i]);
      }
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* plane = xv + ((n * C + c) * H) * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          const double d = static_cast<double>(plane[i]) - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(m);
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
      const double var_unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      rm[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rm[c]) + momentum * mu);
      rv[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rv[c]) + momentum * var_unbiased);
    }
  } else {
    const T* rm = running_mean.data().data();
    const T* rv = running_var.data().data();
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = static_cast<double>(rm[c]);
      invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
    }
  }

  std::vector<T> out(x.data().size());
  for (std::int64_t c = 0; c < C; ++c) {
    const double mu = mean[static_cast<std::size_t>(c)];
    const double is = invstd[static_cast<std::size_t>(c)];
    const double g = static_cast<double>(gv[c]);
    const double b = static_cast<double>(bv[c]);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* plane = xv + ((n * C + c) * H) * W;
      T* oplane = out.data() + ((n * C + c) * H) * W;
      for (std::int64_t i = 0; i < H * W; ++i) {
        oplane[i] = static_cast<T>((static_cast<double>(plane[i]) - mu) * is * g + b);
      }
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const bool train = mode == Mode::kTrain;
  auto bw = [xn, gn, bn, N, C, H, W, m, mean, invstd, train](NodeT<T>& node) {
    const T* go = node.grad.data();
    const T* xv = xn->value.data();
    const T* gv = gn->value.data();
    for (std::int64_t c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = invstd[static_cast<std::size_t>(c)];
      double sum_g = 0.0, sum_gx = 0.0;  // sums of dy and dy*xhat
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t base = ((n * C + c) * H) * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          const double g = static_cast<double>(go[base + i]);
          sum_g += g;
          sum_gx += g * (static_cast<double>(xv[base + i]) - mu) * is;
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        gn->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_gx);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_g);
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const double gam = static_cast<double>(gv[c]);
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::int64_t n = 0; n < N; ++n) {
          const std::int64_t base = ((n * C + c) * H) * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            const double g = static_cast<double>(go[base + i]);
            const double xh = (static_cast<double>(xv[base + i]) - mu) * is;
            const double dx = train ? gam * is * (g - sum_g * inv_m - xh * sum_gx * inv_m)
                                    : gam * is * g;
            gx[base + i] += static_cast<T>(dx);
          }
        }
      }
    }
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, std::move(bw));
}

// ----------------------------------------------------------------------------
// dropout: train mode zeroes each element with probability rate and scales
// survivors by 1/(1-rate). The mask consumes exactly numel draws from rng.
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Mode mode, Pcg32& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ValueError(detail::msg("dropout: rate must lie in [0,1), got ", rate));
  }
  if (mode == Mode::kEval || rate == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.data().size());
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool keep = rng.next_double() >= rate;
    mask[i] = keep ? scale : T(0);
    out[i] = xv[i] * mask[i];
  }
  auto xn = x.node();
  auto bw = [xn, mask = std::move(mask)](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    T* gx = xn->grad.data();
    for (std::size_t i = 0; i < node.value.size(); ++i) gx[i] += go[i] * mask[i];
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bw));
}

// ----------------------------------------------------------------------------
// Channel concatenation and slicing.
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_rank4("concat_channels", a.shape());
  detail::check_rank4("concat_channels", b.shape());
  const std::int64_t N = a.dim(0), Ca = a.dim(1), H = a.dim(2), W = a.dim(3);
  const std::int64_t Cb = b.dim(1);
  if (b.dim(0) != N || b.dim(2) != H || b.dim(3) != W) {
    throw ShapeError(detail::msg("concat_channels: non-channel axes differ: (", N, ",", H, ",",
                                 W, ") vs (", b.dim(0), ",", b.dim(2), ",", b.dim(3), ")"));
  }
  std::vector<T> out(static_cast<std::size_t>(N * (Ca + Cb) * H * W));
  const std::int64_t plane = H * W;
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy(av + n * Ca * plane, av + (n + 1) * Ca * plane,
              out.begin() + n * (Ca + Cb) * plane);
    std::copy(bv + n * Cb * plane, bv + (n + 1) * Cb * plane,
              out.begin() + (n * (Ca + Cb) + Ca) * plane);
  }
  auto an = a.node();
  auto bn = b.node();
  auto bw = [an, bn, N, Ca, Cb, plane](NodeT<T>& node) {
    const T* go = node.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      T* ga = an->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        const T* src = go + n * (Ca + Cb) * plane;
        T* dst = ga + n * Ca * plane;
        for (std::int64_t i = 0; i < Ca * plane; ++i) dst[i] += src[i];
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        const T* src = go + (n * (Ca + Cb) + Ca) * plane;
        T* dst = gb + n * Cb * plane;
        for (std::int64_t i = 0; i < Cb * plane; ++i) dst[i] += src[i];
      }
    }
  };
  return detail::make_op<T>({N, Ca + Cb, H, W}, std::move(out), {a, b}, std::move(bw));
}

template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, std::int64_t first, std::int64_t count) {
  detail::check_rank4("slice_channels", x.shape());
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (first < 0 || count <= 0 || first + count > C) {
    throw ShapeError(detail::msg("slice_channels: range [", first, ",", first + count,
                                 ") out of channel axis ", C));
  }
  const std::int64_t plane = H * W;
  std::vector<T> out(static_cast<std::size_t>(N * count * plane));
  const T* xv = x.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy(xv + (n * C + first) * plane, xv + (n * C + first + count) * plane,
              out.begin() + n * count * plane);
  }
  auto xn = x.node();
  auto bw = [xn, N, C, first, count, plane](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    T* gx = xn->grad.data();
    for (std::int64_t n = 0; n < N; ++n) {
      const T* src = go + n * count * plane;
      T* dst = gx + (n * C + first) * plane;
      for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  };
  return detail::make_op<T>({N, count, H, W}, std::move(out), {x}, std::move(bw));
}

// ----------------------------------------------------------------------------
// linear: rows = input * weight^T + bias. input [N,Cin], weight [Cout,Cin].
// ----------------------------------------------------------------------------
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError(detail::msg("linear: expected 2-d input and weight, got ranks ", x.rank(),
                                 " and ", w.rank()));
  }
  const std::int64_t N = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  if (w.dim(1) != Ci) {
    throw ShapeError(detail::msg("linear: inner axes differ: input ", Ci, " vs weight ",
                                 w.dim(1)));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != Co)) {
    throw ShapeError(detail::msg("linear: bias axis ", b.defined() ? b.dim(0) : 0,
                                 " does not match output axis ", Co));
  }
  OpCounter::add(static_cast<std::uint64_t>(N) * static_cast<std::uint64_t>(Co * Ci));
  std::vector<T> out(static_cast<std::size_t>(N * Co));
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const T* bv = b.defined() ? b.data().data() : nullptr;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t o = 0; o < Co; ++o) {
      double acc = bv ? static_cast<double>(bv[o]) : 0.0;
      const T* xrow = xv + n * Ci;
      const T* wrow = wv + o * Ci;
      for (std::int64_t i = 0; i < Ci; ++i)
        acc += static_cast<double>(xrow[i]) * static_cast<double>(wrow[i]);
      out[static_cast<std::size_t>(n * Co + o)] = static_cast<T>(acc);
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  auto bw = [xn, wn, bn, N, Ci, Co](NodeT<T>& node) {
    const T* go = node.grad.data();
    const T* xv = xn->value.data();
    const T* wv = wn->value.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < Ci; ++i) {
          double acc = 0.0;
          for (std::int64_t o = 0; o < Co; ++o)
            acc += static_cast<double>(go[n * Co + o]) * static_cast<double>(wv[o * Ci + i]);
          gx[n * Ci + i] += static_cast<T>(acc);
        }
      }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      T* gw = wn->grad.data();
      for (std::int64_t o = 0; o < Co; ++o) {
        for (std::int64_t i = 0; i < Ci; ++i) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < N; ++n)
            acc += static_cast<double>(go[n * Co + o]) * static_cast<double>(xv[n * Ci + i]);
          gw[o * Ci + i] += static_cast<T>(acc);
        }
      }
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      T* gb = bn->grad.data();
      for (std::int64_t o = 0; o < Co; ++o) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) acc += static_cast<double>(go[n * Co + o]);
        gb[o] += static_cast<T>(acc);
      }
    }
  };
  return detail::make_op<T>({N, Co}, std::move(out), {x, w, b}, std::move(bw));
}

// ----------------------------------------------------------------------------
// Elementwise arithmetic and reductions.
// ----------------------------------------------------------------------------

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    std::string sa, sb;
    for (auto v : a.shape()) sa += std::to_string(v) + ",";
    for (auto v : b.shape()) sb += std::to_string(v) + ",";
    throw ShapeError(detail::msg(op, ": shapes (", sa, ") and (", sb, ") differ"));
  }
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("add", a, b);
  std::vector<T> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  auto bw = [an, bn](NodeT<T>& node) {
    const T* go = node.grad.data();
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      T* g = p->grad.data();
      for (std::size_t i = 0; i < node.value.size(); ++i) g[i] += go[i];
    }
  };
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, std::move(bw));
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mul", a, b);
  std::vector<T> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  auto bw = [an, bn](NodeT<T>& node) {
    const T* go = node.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < node.value.size(); ++i)
        an->grad[i] += go[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < node.value.size(); ++i)
        bn->grad[i] += go[i] * an->value[i];
    }
  };
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, std::move(bw));
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T factor) {
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  auto xn = x.node();
  auto bw = [xn, factor](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    for (std::size_t i = 0; i < node.value.size(); ++i) xn->grad[i] += go[i] * factor;
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x}, std::move(bw));
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T v : x.data()) acc += static_cast<double>(v);
  auto xn = x.node();
  auto bw = [xn](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = node.grad[0];
    for (auto& v : xn->grad) v += g;
  };
  return detail::make_op<T>({1}, {static_cast<T>(acc)}, {x}, std::move(bw));
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  double acc = 0.0;
  for (const T v : x.data()) acc += static_cast<double>(v);
  const std::int64_t n = x.numel();
  auto xn = x.node();
  auto bw = [xn, n](NodeT<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T g = static_cast<T>(static_cast<double>(node.grad[0]) / static_cast<double>(n));
    for (auto& v : xn->grad) v += g;
  };
  return detail::make_op<T>({1}, {static_cast<T>(acc / static_cast<double>(n))}, {x},
                            std::move(bw));
}

/// y[n,c,h,w] = x[n,c,h,w] * s[n,c]; the per-channel gate used by SE.
template <class T>
TensorT<T> scale_channels(const TensorT<T>& x, const TensorT<T>& s) {
  detail::check_rank4("scale_channels", x.shape());
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (s.rank() != 2 || s.dim(0) != N || s.dim(1) != C) {
    throw ShapeError(detail::msg("scale_channels: gate shape must be (", N, ",", C, ")"));
  }
  std::vector<T> out(x.data().size());
  const T* xv = x.data().data();
  const T* sv = s.data().data();
  const std::int64_t plane = H * W;
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T g = sv[nc];
    const T* src = xv + nc * plane;
    T* dst = out.data() + nc * plane;
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] * g;
  }
  auto xn = x.node();
  auto sn = s.node();
  auto bw = [xn, sn, N, C, plane](NodeT<T>& node) {
    const T* go = node.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const T* sv = sn->value.data();
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T g = sv[nc];
        for (std::int64_t i = 0; i < plane; ++i) gx[nc * plane + i] += go[nc * plane + i] * g;
      }
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      T* gs = sn->grad.data();
      const T* xv = xn->value.data();
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i)
          acc += static_cast<double>(go[nc * plane + i]) * static_cast<double>(xv[nc * plane + i]);
        gs[nc] += static_cast<T>(acc);
      }
    }
  };
  return detail::make_op<T>(x.shape(), std::move(out), {x, s}, std::move(bw));
}

}  // namespace vesselforge
