#pragma once

// Shared test helpers: random fixtures, central-difference gradient checks and
// brute-force reference implementations. Nothing here calls the code under
// test for the quantity being checked.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <algorithm>

#include "dclr/encoder.hpp"
#include "dclr/numerics/autograd.hpp"
#include "dclr/random.hpp"

namespace dclr::check {

template <typename T = float>
BasicTensor<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

using Build = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

struct GradReport {
  std::size_t probes = 0;
  double worst = 0.0;  // largest relative error seen
};

/// Relative error with a floor so that two tiny gradients count as agreeing.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Compares reverse-mode gradients of `build` against central differences at
/// `probes` randomly chosen input coordinates.
inline GradReport gradient_check(const std::vector<BasicTensor<double>>& inputs, const Build& build,
                                 std::size_t probes, std::uint64_t seed, double h = 1e-5) {
  std::vector<BasicTensor<double>> grads;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.parameter(x));
    auto loss = build(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) grads.push_back(v.grad());
  }
  auto eval = [&](const std::vector<BasicTensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return build(tape, vars).value()[0];
  };
  Rng rng = make_rng(seed, "gradient_check");
  GradReport rep;
  for (std::size_t p = 0; p < probes; ++p) {
    const auto which = uniform_index(rng, inputs.size());
    const auto idx = uniform_index(rng, inputs[which].numel());
    auto plus = inputs, minus = inputs;
    plus[which][idx] += h;
    minus[which][idx] -= h;
    const double numeric = (eval(plus) - eval(minus)) / (2 * h);
    rep.worst = std::max(rep.worst, rel_error(grads[which][idx], numeric));
    ++rep.probes;
  }
  return rep;
}

/// Contracts a tensor-valued op to a scalar with fixed random weights so that
/// every output element contributes a distinct amount to the gradient.
inline Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, "weighted_sum");
  auto r = y.tape().constant(random_tensor<double>(y.shape(), rng));
  return ag::sum(ag::mul(y, r));
}

// ---------------------------------------------------------------------------
// Reference implementations

/// Direct 7-loop convolution, zero padding.
template <typename T>
BasicTensor<T> conv2d_reference(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                                std::size_t pad) {
  const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const long OH = (H + 2 * long(pad) - KH) / long(stride) + 1, OW = (W + 2 * long(pad) - KW) / long(stride) + 1;
  BasicTensor<T> y({std::size_t(B), std::size_t(O), std::size_t(OH), std::size_t(OW)});
  for (long b = 0; b < B; ++b)
    for (long o = 0; o < O; ++o)
      for (long i = 0; i < OH; ++i)
        for (long j = 0; j < OW; ++j) {
          double s = 0;
          for (long c = 0; c < C; ++c)
            for (long u = 0; u < KH; ++u)
              for (long v = 0; v < KW; ++v) {
                const long yy = i * long(stride) + u - long(pad), xx = j * long(stride) + v - long(pad);
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += double(x.at(b, c, yy, xx)) * double(w.at(o, c, u, v));
              }
          y.at(b, o, i, j) = static_cast<T>(s);
        }
  return y;
}

/// O(n^2) NT-Xent written straight from the definition: mean over ordered
/// positive pairs of -log(exp(s_ij/t) / sum_{k != i} exp(s_ik/t)).
inline double nt_xent_reference(const std::vector<std::vector<double>>& z, const std::vector<std::size_t>& partner,
                                double tau) {
  const std::size_t n = z.size();
  auto cos = [&](std::size_t a, std::size_t b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < z[a].size(); ++k) {
      d += z[a][k] * z[b][k];
      na += z[a][k] * z[a][k];
      nb += z[b][k] * z[b][k];
    }
    return d / std::sqrt(na * nb);
  };
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    total += -std::log(std::exp(cos(i, partner[i]) / tau) / denom);
  }
  return total / static_cast<double>(n);
}

/// Kernel entry for pixel (x,y) and offset (dx,dy) evaluated directly.
template <typename T>
BasicTensor<T> kernel_reference(const BasicTensor<T>& f, const std::vector<double>& theta, std::size_t k) {
  const long B = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3), r = long(k) / 2;
  BasicTensor<T> K({std::size_t(B), k, k, std::size_t(H), std::size_t(W)});
  for (long b = 0; b < B; ++b)
    for (long dx = -r; dx <= r; ++dx)
      for (long dy = -r; dy <= r; ++dy)
        for (long x = 0; x < H; ++x)
          for (long y = 0; y < W; ++y) {
            const long nx = x + dx, ny = y + dy;
            if (nx < 0 || nx >= H || ny < 0 || ny >= W) continue;
            double e = 0;
            for (long d = 0; d < D; ++d) {
              const double diff = double(f.at(b, d, x, y)) - double(f.at(b, d, nx, ny));
              e += diff * diff / (2 * theta[d] * theta[d]);
            }
            K.at(b, dx + r, dy + r, x, y) = static_cast<T>(std::exp(-e));
          }
  return K;
}

/// Q[b,c,x,y] = sum over the window of K[b,dx,dy,x,y] * F[b,c,x+dx,y+dy].
template <typename T>
BasicTensor<T> message_reference(const BasicTensor<T>& K, const BasicTensor<T>& F) {
  const long B = F.dim(0), C = F.dim(1), H = F.dim(2), W = F.dim(3), k = K.dim(1), r = k / 2;
  BasicTensor<T> Q(F.shape());
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c)
      for (long x = 0; x < H; ++x)
        for (long y = 0; y < W; ++y) {
          double s = 0;
          for (long dx = -r; dx <= r; ++dx)
            for (long dy = -r; dy <= r; ++dy) {
              const long nx = x + dx, ny = y + dy;
              if (nx < 0 || nx >= H || ny < 0 || ny >= W) continue;
              s += double(K.at(b, dx + r, dy + r, x, y)) * double(F.at(b, c, nx, ny));
            }
          Q.at(b, c, x, y) = static_cast<T>(s);
        }
  return Q;
}

// Brute force: for each instance, scan every pixel for membership in its
// outer border, then take the two smallest per-instance distances.
inline double weight_reference(const encoder::LabelMap& m, std::size_t y, std::size_t x, double w0, double sigma, double wc) {
  const long H = m.dim(0), W = m.dim(1);
  std::int32_t max_label = 0;
  for (auto v : m.data()) max_label = std::max(max_label, v);
  std::vector<double> dist;
  for (std::int32_t k = 1; k <= max_label; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        if (m.at(i, j) == k) continue;
        bool touches = false;
        for (auto [di, dj] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const long a = i + di, b = j + dj;
          if (a >= 0 && a < H && b >= 0 && b < W && m.at(a, b) == k) touches = true;
        }
        if (touches) best = std::min(best, std::hypot(double(i) - double(y), double(j) - double(x)));
      }
    if (std::isfinite(best)) dist.push_back(best);
  }
  std::sort(dist.begin(), dist.end());
  if (dist.size() < 2) return wc;
  const double s = dist[0] + dist[1];
  return wc + w0 * std::exp(-s * s / (2 * sigma * sigma));
}

}  // namespace dclr::check
