#pragma once

// Synthetic histology-like slides with pixel-exact tumour ground truth.
//
// A slide is a white frame around a square tissue area. Tissue is filled with a
// pink non-tumour texture; tumour blobs (unions of a few discs with wavy
// boundaries) use the same texture shifted by delta * kTumourShift, i.e.
// darker and bluer. delta = 0 gives identical colour distributions.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dclr/encoder.hpp"
#include "dclr/io/png.hpp"
#include "dclr/random.hpp"

namespace dclr::datagen {

inline constexpr std::array<double, 3> kTissueColour{0.86, 0.58, 0.74};
inline constexpr std::array<double, 3> kTumourShift{-0.56, -0.50, -0.12};

struct SynthParams {
  std::size_t side = 512;
  std::size_t n_blobs = 3;
  double delta = 0.5;         // colour separation in [0,1]
  double noise = 0.04;        // per-pixel texture noise sigma
  double margin = 0.1;        // white frame width as a fraction of side
  double radius_min = 55.0;   // blob disc radius range in pixels
  double radius_max = 100.0;
  std::size_t lobes = 3;      // discs per blob
  double wobble = 0.08;       // relative boundary perturbation amplitude
  std::uint64_t seed = 1;

  void validate() const {
    if (n_blobs < 1) throw std::invalid_argument("synth: n_blobs must be >= 1");
    if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("synth: delta must lie in [0,1]");
    if (!(margin >= 0.0 && margin < 0.5)) throw std::invalid_argument("synth: margin must lie in [0,0.5)");
    if (!(radius_min > 0.0 && radius_min <= radius_max)) throw std::invalid_argument("synth: bad radius range");
    if (lobes < 1) throw std::invalid_argument("synth: lobes must be >= 1");
    if (!(wobble >= 0.0 && wobble < 0.5)) throw std::invalid_argument("synth: wobble must lie in [0,0.5)");
    if (2.0 * radius_max * (1.0 + 1.5 * wobble) > static_cast<double>(tissue_side()))
      throw std::invalid_argument("synth: blobs larger than the tissue area");
  }

  std::size_t frame() const { return static_cast<std::size_t>(std::floor(margin * static_cast<double>(side))); }
  std::size_t tissue_side() const { return side - 2 * frame(); }
};

/// Named difficulty presets: "separable" (delta 0.5) and "hard" (delta 0.05).
inline SynthParams preset(const std::string& name) {
  SynthParams p;
  if (name == "separable")
    p.delta = 0.5;
  else if (name == "hard")
    p.delta = 0.05;
  else
    throw std::invalid_argument("synth: unknown preset '" + name + "'");
  return p;
}

struct Slide {
  std::string id;
  Tensor image;  // [3,side,side]
  Mask truth;    // [side,side], 1 = tumour
  std::uint64_t seed = 0;
};

namespace detail {
struct Disc {
  double cy, cx, r, a1, p1, a2, p2;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double phi = std::atan2(dy, dx);
    const double rr = r * (1.0 + a1 * std::sin(3.0 * phi + p1) + a2 * std::sin(5.0 * phi + p2));
    return dy * dy + dx * dx <= rr * rr;
  }
};
}  // namespace detail

inline Slide synth_slide(const SynthParams& p) {
  p.validate();
  Rng rng = make_rng(p.seed, "datagen.slide");
  const std::size_t S = p.side, m = p.frame(), T = p.tissue_side();
  const double lo = static_cast<double>(m), hi = static_cast<double>(m + T);

  std::vector<detail::Disc> discs;
  for (std::size_t b = 0; b < p.n_blobs; ++b) {
    const double r0 = uniform(rng, p.radius_min, p.radius_max);
    const double reach = r0 * (1.0 + 1.5 * p.wobble);
    const double cy = uniform(rng, lo + reach, hi - reach), cx = uniform(rng, lo + reach, hi - reach);
    for (std::size_t l = 0; l < p.lobes; ++l) {
      detail::Disc d{cy, cx, r0, 0, 0, 0, 0};
      if (l > 0) {
        const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi), off = uniform(rng, 0.3, 0.6) * r0;
        d.r = r0 * uniform(rng, 0.55, 0.85);
        d.cy = cy + off * std::sin(ang);
        d.cx = cx + off * std::cos(ang);
      }
      d.a1 = p.wobble;
      d.a2 = 0.5 * p.wobble;
      d.p1 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      d.p2 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      discs.push_back(d);
    }
  }

  // Low-frequency shading shared by both tissue classes.
  std::array<double, 9> wave{};
  for (std::size_t i = 0; i < 3; ++i) {
    wave[3 * i] = uniform(rng, 0.005, 0.03);
    wave[3 * i + 1] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    wave[3 * i + 2] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }

  Slide s{"", Tensor({3, S, S}, 1.0f), Mask({S, S}), p.seed};
  for (std::size_t y = m; y < m + T; ++y)
    for (std::size_t x = m; x < m + T; ++x) {
      bool tumour = false;
      for (const auto& d : discs)
        if (d.contains(static_cast<double>(y), static_cast<double>(x))) {
          tumour = true;
          break;
        }
      s.truth.at(y, x) = tumour ? 1 : 0;
      double shade = 0;
      for (std::size_t i = 0; i < 3; ++i)
        shade += 0.03 * std::sin(wave[3 * i] * y + wave[3 * i + 1]) * std::cos(wave[3 * i] * x + wave[3 * i + 2]);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = kTissueColour[c] + shade + normal(rng, 0.0, p.noise);
        if (tumour) v += p.delta * kTumourShift[c];
        s.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

struct Dataset {
  std::vector<Slide> train, test;
};

/// n independent slides with per-slide seeds, split by slide.
inline Dataset synth_dataset(std::size_t n, const SynthParams& params, double split = 0.8) {
  if (n < 2) throw std::invalid_argument("synth_dataset: need at least 2 slides");
  if (!(split > 0.0 && split < 1.0)) throw std::invalid_argument("synth_dataset: split must lie in (0,1)");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(params.seed, "datagen.split");
  shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(split * n)), 1, n - 1);
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    SynthParams p = params;
    p.seed = derive_seed(params.seed, "datagen.slide_seed", {i});
    Slide s = synth_slide(p);
    char id[32];
    std::snprintf(id, sizeof id, "slide_%03zu", i);
    s.id = id;
    (is_train[i] ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

/// Non-overlapping disc-shaped cell instances (labels 1..n) on an empty
/// background, for exercising the instance-border weight map.
inline encoder::LabelMap synth_instances(std::size_t side, std::size_t n_cells, double radius, double min_gap,
                                         std::uint64_t seed) {
  Rng rng = make_rng(seed, "datagen.instances");
  encoder::LabelMap m({side, side}, 0);
  std::vector<std::array<double, 2>> centres;
  for (std::size_t tries = 0; centres.size() < n_cells && tries < 10000; ++tries) {
    const double cy = uniform(rng, radius + 1, side - radius - 1), cx = uniform(rng, radius + 1, side - radius - 1);
    bool ok = true;
    for (auto& c : centres)
      if (std::hypot(c[0] - cy, c[1] - cx) < 2 * radius + min_gap) ok = false;
    if (ok) centres.push_back({cy, cx});
  }
  for (std::size_t k = 0; k < centres.size(); ++k)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x)
        if (std::hypot(y - centres[k][0], x - centres[k][1]) <= radius) m.at(y, x) = static_cast<std::int32_t>(k + 1);
  return m;
}

/// Bhattacharyya distance between the tumour and non-tumour tissue luma
/// histograms (`bins` bins over [0,1]).
inline double bhattacharyya_distance(const Slide& s, std::size_t bins = 64) {
  const std::size_t S = s.truth.dim(0), P = S * S;
  std::vector<double> h[2] = {std::vector<double>(bins), std::vector<double>(bins)};
  double n[2] = {0, 0};
  for (std::size_t i = 0; i < P; ++i) {
    const float l = 0.299f * s.image[i] + 0.587f * s.image[P + i] + 0.114f * s.image[2 * P + i];
    if (l >= 0.999f) continue;  // background frame
    const auto b = std::min(bins - 1, static_cast<std::size_t>(l * bins));
    h[s.truth[i]][b] += 1;
    n[s.truth[i]] += 1;
  }
  double bc = 0;
  for (std::size_t b = 0; b < bins; ++b) bc += std::sqrt((h[0][b] / n[0]) * (h[1][b] / n[1]));
  return -std::log(std::max(bc, 1e-300));
}

}  // namespace dclr::datagen
