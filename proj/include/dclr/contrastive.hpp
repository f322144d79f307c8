#pragma once

// Two-view batches and the normalized-temperature cross-entropy (NT-Xent) loss.

#include <cmath>
#include <span>
#include <vector>

#include "dclr/augment.hpp"
#include "dclr/numerics/autograd.hpp"

namespace dclr::contrastive {

/// Views 2m and 2m+1 come from source sample m.
struct ContrastiveBatch {
  Tensor views;  // [2b,3,s,s]
  std::vector<std::size_t> partner;
  double temperature = 0.5;

  std::size_t num_views() const { return partner.size(); }
  std::size_t negatives_per_view() const { return partner.size() - 2; }
};

inline std::vector<std::size_t> adjacent_pairing(std::size_t views) {
  std::vector<std::size_t> p(views);
  for (std::size_t i = 0; i < views; ++i) p[i] = i ^ 1u;
  return p;
}

/// Augments each sample twice; `ids` name the per-patch augmentation streams.
inline ContrastiveBatch build_batch(std::span<const Tensor> samples, std::span<const std::uint64_t> ids,
                                    const augment::Policy& policy, std::uint64_t seed, double temperature = 0.5) {
  if (samples.size() < 2) throw std::invalid_argument("build_batch: need b >= 2 samples so negatives exist");
  if (ids.size() != samples.size()) throw std::invalid_argument("build_batch: one id per sample required");
  if (!(temperature > 0.0)) throw std::invalid_argument("build_batch: temperature must be positive");
  std::vector<Tensor> views;
  views.reserve(2 * samples.size());
  for (std::size_t m = 0; m < samples.size(); ++m) {
    auto pair = augment::sample_pair(samples[m], policy, seed, ids[m]);
    views.push_back(std::move(pair.x_i));
    views.push_back(std::move(pair.x_j));
  }
  return {image::stack(views), adjacent_pairing(views.size()), temperature};
}

template <typename T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: length mismatch");
  T dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (!(nu > 0) || !(nv > 0))
    throw std::domain_error("cosine_similarity: zero-norm vector (collapsed embedding)");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), T(-1), T(1));
}

namespace detail {

inline void check_pairing(std::span<const std::size_t> partner, std::size_t n) {
  if (partner.size() != n) throw ShapeError("nt_xent: pairing length does not match number of rows");
  for (std::size_t i = 0; i < n; ++i)
    if (partner[i] >= n || partner[i] == i || partner[partner[i]] != i)
      throw std::invalid_argument("nt_xent: pairing must be a fixed-point-free involution");
}

template <typename T>
struct Forward {
  T loss = 0;
  BasicTensor<T> unit;   // [n,p] row-normalized Z
  std::vector<T> norms;  // row norms
  BasicTensor<T> prob;   // [n,n] softmax over k != i of sim/tau
};

template <typename T>
Forward<T> forward(const BasicTensor<T>& z, std::span<const std::size_t> partner, T tau) {
  if (z.rank() != 2) throw ShapeError("nt_xent: expected [2b,proj], got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), p = z.dim(1);
  if (n < 4) throw std::invalid_argument("nt_xent: need 2b >= 4 views");
  if (!(tau > 0)) throw std::invalid_argument("nt_xent: temperature must be positive");
  check_pairing(partner, n);
  Forward<T> f{0, z, std::vector<T>(n), BasicTensor<T>({n, n})};
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t k = 0; k < p; ++k) s += z.at(i, k) * z.at(i, k);
    f.norms[i] = std::sqrt(s);
    if (!(f.norms[i] > 0)) throw std::domain_error("nt_xent: zero-norm embedding row (collapsed embedding)");
    for (std::size_t k = 0; k < p; ++k) f.unit.at(i, k) /= f.norms[i];
  }
  const auto sim = numerics::matmul_nt(f.unit, f.unit);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isfinite(sim.at(i, k)))
        throw std::domain_error("nt_xent: non-finite similarity (collapsed embedding)");
      if (k != i) mx = std::max(mx, sim.at(i, k) / tau);
    }
    T denom = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += f.prob.at(i, k) = std::exp(sim.at(i, k) / tau - mx);
    for (std::size_t k = 0; k < n; ++k) f.prob.at(i, k) /= denom;
    f.loss += -(sim.at(i, partner[i]) / tau - mx) + std::log(denom);
  }
  f.loss /= static_cast<T>(n);
  return f;
}

}  // namespace detail

/// Mean over all 2b ordered positive pairs (i, partner(i)) of
/// -log( exp(s_ij/tau) / sum_{k != i} exp(s_ik/tau) ).
template <typename T>
T nt_xent_value(const BasicTensor<T>& z, std::span<const std::size_t> partner, T tau) {
  return detail::forward(z, partner, tau).loss;
}

/// Traced NT-Xent; returns a scalar on z's tape.
template <typename T>
Var<T> nt_xent(const Var<T>& z, std::span<const std::size_t> partner, T tau) {
  auto f = detail::forward(z.value(), partner, tau);
  const auto zi = z.id();
  std::vector<std::size_t> part(partner.begin(), partner.end());
  const T loss = f.loss;
  return z.tape().record(
      BasicTensor<T>::scalar(loss), z.requires_grad(),
      [zi, part = std::move(part), f = std::move(f), tau](Tape<T>& t, const BasicTensor<T>& g) {
        const std::size_t n = f.unit.dim(0), p = f.unit.dim(1);
        // G[i,k] = dL/dsim[i,k] through row i's term
        BasicTensor<T> G({n, n});
        const T scale = g[0] / (static_cast<T>(n) * tau);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k)
            if (k != i) G.at(i, k) = scale * (f.prob.at(i, k) - (k == part[i] ? T(1) : T(0)));
        BasicTensor<T> du({n, p});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            const T w = G.at(i, k) + G.at(k, i);
            if (w == T(0)) continue;
            for (std::size_t c = 0; c < p; ++c) du.at(i, c) += w * f.unit.at(k, c);
          }
        auto& gz = t.grad_ref(zi);
        for (std::size_t i = 0; i < n; ++i) {
          T proj = 0;
          for (std::size_t c = 0; c < p; ++c) proj += du.at(i, c) * f.unit.at(i, c);
          for (std::size_t c = 0; c < p; ++c) gz.at(i, c) += (du.at(i, c) - proj * f.unit.at(i, c)) / f.norms[i];
        }
      },
      "nt_xent");
}

}  // namespace dclr::contrastive
