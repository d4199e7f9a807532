#pragma once

#include <string>

#include "bayes_layers/ops.hpp"

namespace bayes_layers {

enum class Padding { kSame, kValid };

struct Conv2DGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t stride;
  std::size_t out_h, out_w;
  std::size_t pad_top, pad_left;
};

inline Conv2DGeometry conv2d_geometry(const Shape& x, const Shape& k, std::size_t stride, Padding padding) {
  if (x.size() != 4 || k.size() != 4) {
    fail(ErrorKind::kShape, "conv2d expects input [b,h,w,c] and kernel [kh,kw,cin,cout], got " +
                                shape_string(x) + " and " + shape_string(k));
  }
  if (x[3] != k[2]) {
    fail(ErrorKind::kShape, "conv2d: input channels " + std::to_string(x[3]) + " != kernel input channels " +
                                std::to_string(k[2]));
  }
  if (stride == 0) fail(ErrorKind::kInvalidArgument, "conv2d stride must be >= 1");
  Conv2DGeometry g{x[0], x[1], x[2], x[3], k[0], k[1], k[3], stride, 0, 0, 0, 0};
  if (padding == Padding::kSame) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + g.k_h;
    const std::size_t need_w = (g.out_w - 1) * stride + g.k_w;
    g.pad_top = need_h > g.in_h ? (need_h - g.in_h) / 2 : 0;
    g.pad_left = need_w > g.in_w ? (need_w - g.in_w) / 2 : 0;
  } else {
    if (g.k_h > g.in_h || g.k_w > g.in_w) {
      fail(ErrorKind::kShape, "conv2d: kernel " + std::to_string(g.k_h) + "x" + std::to_string(g.k_w) +
                                  " larger than input " + std::to_string(g.in_h) + "x" + std::to_string(g.in_w));
    }
    g.out_h = (g.in_h - g.k_h) / stride + 1;
    g.out_w = (g.in_w - g.k_w) / stride + 1;
  }
  return g;
}

/// Direct 2-D cross-correlation, NHWC input and HWIO kernel.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride = 1, Padding padding = Padding::kSame) {
  const Conv2DGeometry g = conv2d_geometry(x.shape(), kernel.shape(), stride, padding);
  // Visits every (output position, kernel tap) pair that lands inside the input.
  auto for_each_tap = [g](auto&& fn) {
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t oh = 0; oh < g.out_h; ++oh)
        for (std::size_t ow = 0; ow < g.out_w; ++ow)
          for (std::size_t kh = 0; kh < g.k_h; ++kh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad_top);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t kw = 0; kw < g.k_w; ++kw) {
              const auto iw =
                  static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad_left);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              const std::size_t x_base =
                  ((b * g.in_h + static_cast<std::size_t>(ih)) * g.in_w + static_cast<std::size_t>(iw)) * g.in_c;
              const std::size_t k_base = (kh * g.k_w + kw) * g.in_c * g.out_c;
              const std::size_t y_base = ((b * g.out_h + oh) * g.out_w + ow) * g.out_c;
              fn(x_base, k_base, y_base);
            }
          }
  };
  std::vector<double> out(g.batch * g.out_h * g.out_w * g.out_c, 0.0);
  const auto xv = x.data();
  const auto kv = kernel.data();
  for_each_tap([&](std::size_t xb, std::size_t kb, std::size_t yb) {
    for (std::size_t ci = 0; ci < g.in_c; ++ci) {
      const double xval = xv[xb + ci];
      for (std::size_t co = 0; co < g.out_c; ++co) out[yb + co] += xval * kv[kb + ci * g.out_c + co];
    }
  });
  Tensor cx = x.detach(), ck = kernel.detach();
  return Tape::record("conv2d", Tensor({g.batch, g.out_h, g.out_w, g.out_c}, std::move(out)), {&x, &kernel},
                      [g, cx, ck, for_each_tap](std::span<const double> grad, std::span<double* const> adj) {
                        const auto xv = cx.data();
                        const auto kv = ck.data();
                        for_each_tap([&](std::size_t xb, std::size_t kb, std::size_t yb) {
                          for (std::size_t ci = 0; ci < g.in_c; ++ci)
                            for (std::size_t co = 0; co < g.out_c; ++co) {
                              const double gy = grad[yb + co];
                              if (adj[0]) adj[0][xb + ci] += gy * kv[kb + ci * g.out_c + co];
                              if (adj[1]) adj[1][kb + ci * g.out_c + co] += gy * xv[xb + ci];
                            }
                        });
                      });
}

}  // namespace bayes_layers
