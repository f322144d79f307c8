#pragma once

// Untraced forward/backward kernels. The tape in autograd.hpp wires these into
// reverse-mode differentiation; they are also usable directly for inference.

#include <Eigen/Core>
#include <cstdint>
#include <limits>
#include <vector>

#include "dclr/numerics/parallel.hpp"
#include "dclr/numerics/tensor.hpp"

namespace dclr::numerics {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                           std::size_t pad) {
  require(x.rank() == 4, "conv2d: input must be rank 4 [b,cin,h,w], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weights must be rank 4 [cout,cin,kh,kw], got " + shape_str(w.shape()));
  require(x.dim(1) == w.dim(1), "conv2d: input channels of input " + shape_str(x.shape()) +
                                    " do not match weights " + shape_str(w.shape()));
  require(w.dim(2) % 2 == 1 && w.dim(3) % 2 == 1,
          "conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  require(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw,
          "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

namespace detail {

// col has shape [cin*kh*kw, oh*ow] for one batch element.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        const T* src = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[iy * g.w + ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        T* dst = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                              std::size_t pad) {
  const auto g = conv_geometry(x, w, stride, pad);
  BasicTensor<T> y({g.batch, g.cout, g.oh, g.ow});
  const std::size_t krows = g.cin * g.kh * g.kw, plane = g.oh * g.ow;
  ConstMatMap<T> wm(w.data().data(), g.cout, krows);
  parallel_for(g.batch, [&](std::size_t b) {
    std::vector<T> col(krows * plane);
    detail::im2col(x.data().data() + b * g.cin * g.h * g.w, g, col.data());
    MatMap<T> ym(y.data().data() + b * g.cout * plane, g.cout, plane);
    ym.noalias() = wm * ConstMatMap<T>(col.data(), krows, plane);
  });
  return y;
}

/// Accumulates input and weight gradients into dx/dw (either may be null).
/// Weight gradients are reduced over the batch in index order.
template <typename T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                     std::size_t stride, std::size_t pad, BasicTensor<T>* dx, BasicTensor<T>* dw) {
  const auto g = conv_geometry(x, w, stride, pad);
  const std::size_t krows = g.cin * g.kh * g.kw, plane = g.oh * g.ow;
  ConstMatMap<T> wm(w.data().data(), g.cout, krows);
  std::vector<RowMatrix<T>> partial(dw ? g.batch : 0);
  parallel_for(g.batch, [&](std::size_t b) {
    std::vector<T> col(krows * plane);
    ConstMatMap<T> dym(dy.data().data() + b * g.cout * plane, g.cout, plane);
    if (dw) {
      detail::im2col(x.data().data() + b * g.cin * g.h * g.w, g, col.data());
      partial[b].noalias() = dym * ConstMatMap<T>(col.data(), krows, plane).transpose();
    }
    if (dx) {
      MatMap<T> colm(col.data(), krows, plane);
      colm.noalias() = wm.transpose() * dym;
      detail::col2im_add(col.data(), g, dx->data().data() + b * g.cin * g.h * g.w);
    }
  });
  if (dw) {
    MatMap<T> dwm(dw->data().data(), g.cout, krows);
    for (auto& p : partial) dwm += p;
  }
}

template <typename T>
struct PoolResult {
  BasicTensor<T> out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

template <typename T>
PoolResult<T> maxpool2x2_forward(const BasicTensor<T>& x) {
  require(x.rank() == 4, "maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2d: spatial extents must be even, got " + shape_str(x.shape()));
  PoolResult<T> r{BasicTensor<T>({B, C, H / 2, W / 2}), {}};
  r.argmax.resize(r.out.numel());
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < H / 2; ++y)
      for (std::size_t xx = 0; xx < W / 2; ++xx, ++o) {
        std::size_t best = bc * H * W + (2 * y) * W + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = bc * H * W + (2 * y + dy) * W + 2 * xx + dx;
            if (x[idx] > x[best]) best = idx;
          }
        r.out[o] = x[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
  return r;
}

template <typename T>
BasicTensor<T> upsample2x_forward(const BasicTensor<T>& x) {
  require(x.rank() == 4, "upsample2x: input must be rank 4, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  BasicTensor<T> y({B, C, 2 * H, 2 * W});
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t yy = 0; yy < 2 * H; ++yy)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        y[(bc * 2 * H + yy) * 2 * W + xx] = x[(bc * H + yy / 2) * W + xx / 2];
  return y;
}

template <typename T>
void upsample2x_backward(const BasicTensor<T>& dy, BasicTensor<T>& dx) {
  const std::size_t H = dx.dim(2), W = dx.dim(3), BC = dx.dim(0) * dx.dim(1);
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t yy = 0; yy < 2 * H; ++yy)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        dx[(bc * H + yy / 2) * W + xx / 2] += dy[(bc * 2 * H + yy) * 2 * W + xx];
}

template <typename T>
BasicTensor<T> global_avg_pool_forward(const BasicTensor<T>& x) {
  require(x.rank() == 4, "global_avg_pool: input must be rank 4, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  BasicTensor<T> y({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T s = 0;
    for (std::size_t p = 0; p < P; ++p) s += x[bc * P + p];
    y[bc] = s / static_cast<T>(P);
  }
  return y;
}

/// a[m,k] * b[n,k]^T -> [m,n]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  BasicTensor<T> y({a.dim(0), b.dim(0)});
  MatMap<T>(y.data().data(), a.dim(0), b.dim(0)).noalias() =
      ConstMatMap<T>(a.data().data(), a.dim(0), a.dim(1)) *
      ConstMatMap<T>(b.data().data(), b.dim(0), b.dim(1)).transpose();
  return y;
}

}  // namespace dclr::numerics
