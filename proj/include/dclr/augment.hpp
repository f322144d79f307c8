#pragma once

// Stochastic augmentation: maps one patch to two correlated views.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dclr/image.hpp"
#include "dclr/random.hpp"

namespace dclr::augment {

enum class Kind { ResizedCrop, HorizontalFlip, Cutout, ColourJitter, ColourDrop, GaussianBlur, Sobel };

inline constexpr std::array<std::pair<Kind, std::string_view>, 7> kKindNames{{
    {Kind::ResizedCrop, "resized-crop"},
    {Kind::HorizontalFlip, "horizontal-flip"},
    {Kind::Cutout, "cutout"},
    {Kind::ColourJitter, "colour-jitter"},
    {Kind::ColourDrop, "colour-drop"},
    {Kind::GaussianBlur, "gaussian-blur"},
    {Kind::Sobel, "sobel"},
}};

inline std::string_view kind_name(Kind k) {
  for (auto& [kind, name] : kKindNames)
    if (kind == k) return name;
  return "?";
}

inline std::optional<Kind> parse_kind(std::string_view s) {
  for (auto& [kind, name] : kKindNames)
    if (name == s) return kind;
  return std::nullopt;
}

/// One entry of an augmentation policy. Only the parameters of `kind` are read.
struct TransformSpec {
  Kind kind = Kind::HorizontalFlip;
  double probability = 1.0;
  double scale_min = 0.2, scale_max = 1.0;  // resized-crop area fraction
  double side_fraction = 0.25;              // cutout
  double strength = 1.0;                    // colour-jitter s
  double sigma_min = 0.1, sigma_max = 2.0;  // gaussian-blur

  void validate() const {
    auto fail = [&](const std::string& what) {
      throw std::invalid_argument(std::string(kind_name(kind)) + ": " + what);
    };
    if (!(probability >= 0.0 && probability <= 1.0)) fail("probability must lie in [0,1]");
    if (kind == Kind::ResizedCrop && !(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
      fail("crop scale range must satisfy 0 < min <= max <= 1");
    if (kind == Kind::Cutout && !(side_fraction >= 0.0 && side_fraction <= 1.0))
      fail("cutout side fraction must lie in [0,1]");
    if (kind == Kind::ColourJitter && !(strength >= 0.0)) fail("jitter strength must be >= 0");
    if (kind == Kind::GaussianBlur && !(sigma_min > 0.0 && sigma_min <= sigma_max))
      fail("blur sigma range must satisfy 0 < min <= max");
  }
};

/// Ordered transform list plus the view shape every output is brought to
/// (0 keeps the input extent).
struct Policy {
  std::vector<TransformSpec> transforms;
  std::size_t out_h = 0, out_w = 0;
};

/// The default policy: resized crop, flip, strong colour distortion, blur and
/// cutout. Sobel is present but gated off.
inline Policy default_policy(std::size_t out_side = 0) {
  Policy p;
  p.out_h = p.out_w = out_side;
  auto spec = [](Kind k, double prob) {
    TransformSpec t;
    t.kind = k;
    t.probability = prob;
    return t;
  };
  p.transforms = {spec(Kind::ResizedCrop, 1.0),  spec(Kind::HorizontalFlip, 0.5), spec(Kind::ColourJitter, 0.8),
                  spec(Kind::ColourDrop, 0.2),   spec(Kind::GaussianBlur, 0.5),   spec(Kind::Cutout, 0.5),
                  spec(Kind::Sobel, 0.0)};
  return p;
}

struct ViewPair {
  Tensor x_i, x_j;
  std::uint64_t source_id = 0;
};

// ---------------------------------------------------------------------------
// Individual transforms

inline Tensor horizontal_flip(const Tensor& x) {
  image::require_chw(x, "horizontal_flip");
  Tensor y = x;
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) y.at(c, i, j) = x.at(c, i, W - 1 - j);
  return y;
}

/// Zeroes a square of side floor(side_fraction * min(h,w)) at a uniform position.
inline Tensor cutout(const Tensor& x, double side_fraction, Rng& rng) {
  image::require_chw(x, "cutout");
  if (!(side_fraction >= 0.0 && side_fraction <= 1.0))
    throw std::invalid_argument("cutout: side fraction must lie in [0,1]");
  const std::size_t H = x.dim(1), W = x.dim(2);
  const auto side = static_cast<std::size_t>(std::floor(side_fraction * static_cast<double>(std::min(H, W))));
  const std::size_t y0 = uniform_index(rng, H - side + 1), x0 = uniform_index(rng, W - side + 1);
  Tensor y = x;
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = y0; i < y0 + side; ++i)
      for (std::size_t j = x0; j < x0 + side; ++j) y.at(c, i, j) = 0.0f;
  return y;
}

inline Tensor colour_drop(const Tensor& x) {
  image::require_chw(x, "colour_drop");
  if (x.dim(0) != 3) throw ShapeError("colour_drop: expected 3 channels, got " + shape_str(x.shape()));
  Tensor y = x;
  const std::size_t P = x.dim(1) * x.dim(2);
  for (std::size_t p = 0; p < P; ++p) {
    const float l = image::clamp01(image::luma(x[p], x[P + p], x[2 * P + p]));
    y[p] = y[P + p] = y[2 * P + p] = l;
  }
  return y;
}

inline Tensor adjust_brightness(const Tensor& x, double f) {
  Tensor y = x;
  for (auto& v : y.data()) v = image::clamp01(static_cast<float>(v * f));
  return y;
}

/// mean + f * (v - mean), with mean the image's mean luma.
inline Tensor adjust_contrast(const Tensor& x, double f) {
  image::require_chw(x, "adjust_contrast");
  const std::size_t P = x.dim(1) * x.dim(2);
  double mean = 0;
  if (x.dim(0) == 3) {
    for (std::size_t p = 0; p < P; ++p) mean += image::luma(x[p], x[P + p], x[2 * P + p]);
    mean /= static_cast<double>(P);
  } else {
    mean = x.sum() / static_cast<double>(x.numel());
  }
  Tensor y = x;
  for (auto& v : y.data()) v = image::clamp01(static_cast<float>(mean + f * (v - mean)));
  return y;
}

/// Blend each pixel with its own luma: gray + f * (v - gray).
inline Tensor adjust_saturation(const Tensor& x, double f) {
  image::require_chw(x, "adjust_saturation");
  if (x.dim(0) != 3) return x;
  const std::size_t P = x.dim(1) * x.dim(2);
  Tensor y = x;
  for (std::size_t p = 0; p < P; ++p) {
    const double g = image::luma(x[p], x[P + p], x[2 * P + p]);
    for (std::size_t c = 0; c < 3; ++c) y[c * P + p] = image::clamp01(static_cast<float>(g + f * (x[c * P + p] - g)));
  }
  return y;
}

/// Rotates hue by `shift`, a fraction of the full hue circle.
inline Tensor adjust_hue(const Tensor& x, double shift) {
  image::require_chw(x, "adjust_hue");
  if (x.dim(0) != 3) return x;
  const std::size_t P = x.dim(1) * x.dim(2);
  Tensor y = x;
  for (std::size_t p = 0; p < P; ++p) {
    const double r = x[p], g = x[P + p], b = x[2 * P + p];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    if (d <= 0.0) continue;
    double h;
    if (mx == r)
      h = (g - b) / d;
    else if (mx == g)
      h = 2.0 + (b - r) / d;
    else
      h = 4.0 + (r - g) / d;
    h = h / 6.0 + shift;
    h -= std::floor(h);
    const double s = d / mx, v = mx;
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double frac = hh - std::floor(hh);
    const double pp = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = v, rgb[1] = t, rgb[2] = pp; break;
      case 1: rgb[0] = q, rgb[1] = v, rgb[2] = pp; break;
      case 2: rgb[0] = pp, rgb[1] = v, rgb[2] = t; break;
      case 3: rgb[0] = pp, rgb[1] = q, rgb[2] = v; break;
      case 4: rgb[0] = t, rgb[1] = pp, rgb[2] = v; break;
      default: rgb[0] = v, rgb[1] = pp, rgb[2] = q; break;
    }
    for (std::size_t c = 0; c < 3; ++c) y[c * P + p] = image::clamp01(static_cast<float>(rgb[c]));
  }
  return y;
}

/// Brightness, contrast and saturation factors uniform in [max(0,1-0.8s), 1+0.8s],
/// hue shift uniform in [-0.2s, 0.2s]; the four are applied in random order.
inline Tensor colour_jitter(const Tensor& x, double s, Rng& rng) {
  if (!(s >= 0.0)) throw std::invalid_argument("colour_jitter: strength must be >= 0");
  const double lo = std::max(0.0, 1.0 - 0.8 * s), hi = 1.0 + 0.8 * s;
  const double fb = uniform(rng, lo, hi), fc = uniform(rng, lo, hi), fs = uniform(rng, lo, hi);
  const double dh = uniform(rng, -0.2 * s, 0.2 * s);
  std::array<int, 4> order{0, 1, 2, 3};
  shuffle(order.begin(), order.end(), rng);
  if (s == 0.0) return x;
  Tensor y = x;
  for (int op : order) {
    switch (op) {
      case 0: y = adjust_brightness(y, fb); break;
      case 1: y = adjust_contrast(y, fc); break;
      case 2: y = adjust_saturation(y, fs); break;
      default: y = adjust_hue(y, dh); break;
    }
  }
  return y;
}

namespace detail {
// Half-sample symmetric reflection: ... b a | a b c ... c | c b ...
inline std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}
}  // namespace detail

/// Separable Gaussian blur, radius ceil(3 sigma), normalized kernel, reflect padding.
inline Tensor gaussian_blur(const Tensor& x, double sigma) {
  image::require_chw(x, "gaussian_blur");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (long i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (auto& v : k) v /= ks;
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor tmp(x.shape()), y(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * x.at(c, i, detail::reflect(static_cast<long>(j) + d, W));
        tmp.at(c, i, j) = static_cast<float>(s);
      }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * tmp.at(c, detail::reflect(static_cast<long>(i) + d, H), j);
        y.at(c, i, j) = image::clamp01(static_cast<float>(s));
      }
  return y;
}

/// Per-channel Sobel gradient magnitude, scaled so each channel's maximum is 1.
inline Tensor sobel(const Tensor& x) {
  image::require_chw(x, "sobel");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y(x.shape());
  auto px = [&](std::size_t c, long i, long j) {
    return x.at(c, detail::reflect(i, static_cast<long>(H)), detail::reflect(j, static_cast<long>(W)));
  };
  for (std::size_t c = 0; c < C; ++c) {
    float mx = 0;
    for (long i = 0; i < static_cast<long>(H); ++i)
      for (long j = 0; j < static_cast<long>(W); ++j) {
        const float gx = (px(c, i - 1, j + 1) + 2 * px(c, i, j + 1) + px(c, i + 1, j + 1)) -
                         (px(c, i - 1, j - 1) + 2 * px(c, i, j - 1) + px(c, i + 1, j - 1));
        const float gy = (px(c, i + 1, j - 1) + 2 * px(c, i + 1, j) + px(c, i + 1, j + 1)) -
                         (px(c, i - 1, j - 1) + 2 * px(c, i - 1, j) + px(c, i - 1, j + 1));
        const float m = std::sqrt(gx * gx + gy * gy);
        y.at(c, i, j) = m;
        mx = std::max(mx, m);
      }
    if (mx > 0)
      for (std::size_t p = 0; p < H * W; ++p) y[c * H * W + p] = image::clamp01(y[c * H * W + p] / mx);
  }
  return y;
}

/// Crops a window covering a uniform area fraction from scale_range, with the
/// input's aspect ratio, and resizes it bilinearly to (out_h, out_w).
inline Tensor random_resized_crop(const Tensor& x, double scale_min, double scale_max, std::size_t out_h,
                                  std::size_t out_w, Rng& rng) {
  image::require_chw(x, "random_resized_crop");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
    throw std::invalid_argument("random_resized_crop: scale range must satisfy 0 < min <= max <= 1");
  const std::size_t H = x.dim(1), W = x.dim(2);
  const double side = std::sqrt(uniform(rng, scale_min, scale_max));
  const auto ch = static_cast<std::size_t>(std::lround(side * static_cast<double>(H)));
  const auto cw = static_cast<std::size_t>(std::lround(side * static_cast<double>(W)));
  if (ch < 1 || cw < 1) throw std::invalid_argument("random_resized_crop: crop window smaller than one pixel");
  const std::size_t y0 = uniform_index(rng, H - ch + 1), x0 = uniform_index(rng, W - cw + 1);
  return image::resize_bilinear(image::crop(x, y0, x0, ch, cw), out_h, out_w);
}

// ---------------------------------------------------------------------------
// Policies

/// One stochastic realization of `policy`. Every gate and parameter is a fresh
/// draw from `rng`; gate draws are consumed even for transforms that end up off.
inline Tensor apply_policy(const Tensor& x, const Policy& policy, Rng& rng) {
  image::require_chw(x, "apply_policy");
  const std::size_t oh = policy.out_h ? policy.out_h : x.dim(1);
  const std::size_t ow = policy.out_w ? policy.out_w : x.dim(2);
  Tensor y = x;
  for (const auto& t : policy.transforms) {
    t.validate();
    const bool on = bernoulli(rng, t.probability);
    if (!on) continue;
    switch (t.kind) {
      case Kind::ResizedCrop: y = random_resized_crop(y, t.scale_min, t.scale_max, oh, ow, rng); break;
      case Kind::HorizontalFlip: y = horizontal_flip(y); break;
      case Kind::Cutout: y = cutout(y, t.side_fraction, rng); break;
      case Kind::ColourJitter: y = colour_jitter(y, t.strength, rng); break;
      case Kind::ColourDrop: y = colour_drop(y); break;
      case Kind::GaussianBlur: y = gaussian_blur(y, uniform(rng, t.sigma_min, t.sigma_max)); break;
      case Kind::Sobel: y = sobel(y); break;
    }
  }
  if (y.dim(1) != oh || y.dim(2) != ow) y = image::resize_bilinear(y, oh, ow);
  image::clamp01(y);
  return y;
}

inline void require_unit_range(const Tensor& x) {
  for (float v : x.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("sample_pair: input values must lie in [0,1]");
}

/// Two independent realizations of `policy` drawn from the given streams.
inline ViewPair sample_pair(const Tensor& x, const Policy& policy, Rng& rng_i, Rng& rng_j,
                            std::uint64_t source_id = 0) {
  require_unit_range(x);
  return {apply_policy(x, policy, rng_i), apply_policy(x, policy, rng_j), source_id};
}

/// Views drawn from the per-patch streams (seed, source_id, view 0/1).
inline ViewPair sample_pair(const Tensor& x, const Policy& policy, std::uint64_t seed, std::uint64_t source_id) {
  Rng ri = make_rng(seed, "augment", {source_id, 0});
  Rng rj = make_rng(seed, "augment", {source_id, 1});
  return sample_pair(x, policy, ri, rj, source_id);
}

}  // namespace dclr::augment
