#pragma once

// Helpers on [c,h,w] image tensors with values in [0,1].

#include <algorithm>
#include <cmath>

#include "dclr/numerics/tensor.hpp"

namespace dclr::image {

inline void require_chw(const Tensor& x, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected [c,h,w] image, got " + shape_str(x.shape()));
}

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

inline void clamp01(Tensor& x) {
  for (auto& v : x.data()) v = clamp01(v);
}

inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

/// Bilinear resize with pixel-centre alignment; identity when sizes match.
inline Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow) {
  require_chw(x, "resize_bilinear");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y({C, oh, ow});
  const double sy = static_cast<double>(H) / static_cast<double>(oh);
  const double sx = static_cast<double>(W) / static_cast<double>(ow);
  for (std::size_t yy = 0; yy < oh; ++yy) {
    const double fy = std::clamp((yy + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const double fx = std::clamp((xx + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double top = (1 - ax) * x.at(c, y0, x0) + ax * x.at(c, y0, x1);
        const double bot = (1 - ax) * x.at(c, y1, x0) + ax * x.at(c, y1, x1);
        y.at(c, yy, xx) = static_cast<float>((1 - ay) * top + ay * bot);
      }
    }
  }
  return y;
}

inline Tensor crop(const Tensor& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  require_chw(x, "crop");
  if (y0 + h > x.dim(1) || x0 + w > x.dim(2) || h == 0 || w == 0)
    throw ShapeError("crop: window out of bounds for " + shape_str(x.shape()));
  Tensor y({x.dim(0), h, w});
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) y.at(c, i, j) = x.at(c, y0 + i, x0 + j);
  return y;
}

/// Stacks equally shaped [c,h,w] images into [n,c,h,w].
inline Tensor stack(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("stack: no images");
  Shape s{images.size()};
  s.insert(s.end(), images[0].shape().begin(), images[0].shape().end());
  Tensor out(s);
  const std::size_t n = images[0].numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != images[0].shape())
      throw ShapeError("stack: image " + std::to_string(i) + " has shape " + shape_str(images[i].shape()));
    std::copy(images[i].data().begin(), images[i].data().end(), out.data().begin() + i * n);
  }
  return out;
}

}  // namespace dclr::image
