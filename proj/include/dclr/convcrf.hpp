#pragma once

// Convolutional CRF refinement.
//
// Pairwise potentials are truncated to a k x k window, so message passing is a
// per-pixel convolution with position-dependent weights:
//
//   g[b,dx,dy,x,y] = exp(-sum_i |f_i(x,y) - f_i(x+dx,y+dy)|^2 / (2 theta_i^2))
//   K              = sum_s w_s g_s
//   Q[b,c,x,y]     = sum_{dx,dy} K[b,dx,dy,x,y] F[b,c,x+dx,y+dy]
//
// Offsets run over the centred window {-(k-1)/2..(k-1)/2}^2 and stored at
// index offset + (k-1)/2. x is the row axis, y the column axis. Neighbours
// outside the image contribute nothing.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dclr/encoder.hpp"
#include "dclr/numerics/autograd.hpp"
#include "dclr/numerics/parallel.hpp"

namespace dclr::convcrf {

enum class FeatureKind { Spatial, Bilateral };

/// One Gaussian kernel: its feature vector kind, a bandwidth per feature
/// dimension ((row, col) or (row, col, R, G, B)), and its merge weight.
struct KernelSpec {
  FeatureKind kind = FeatureKind::Spatial;
  std::vector<double> theta;
  double weight = 1.0;

  static KernelSpec spatial(double theta_xy, double weight) { return {FeatureKind::Spatial, {theta_xy, theta_xy}, weight}; }
  static KernelSpec bilateral(double theta_xy, double theta_rgb, double weight) {
    return {FeatureKind::Bilateral, {theta_xy, theta_xy, theta_rgb, theta_rgb, theta_rgb}, weight};
  }

  std::size_t feature_dims() const { return kind == FeatureKind::Spatial ? 2 : 5; }

  void validate() const {
    if (theta.size() != feature_dims())
      throw std::invalid_argument("KernelSpec: expected " + std::to_string(feature_dims()) + " bandwidths, got " +
                                  std::to_string(theta.size()));
    for (double t : theta)
      if (!(t > 0.0)) throw std::invalid_argument("KernelSpec: bandwidths must be positive");
  }
};

struct CrfOptions {
  std::size_t filter_size = 7;
  std::size_t iterations = 5;
};

/// Default kernel pair: spatial (theta 3 px) and bilateral (3 px, colour 0.1).
inline std::vector<KernelSpec> default_kernels() {
  return {KernelSpec::spatial(3.0, 0.5), KernelSpec::bilateral(3.0, 0.1, 2.0)};
}

inline void require_odd_filter(std::size_t k) {
  if (k == 0 || k % 2 == 0) throw std::invalid_argument("convcrf: filter size must be odd, got " + std::to_string(k));
}

/// Feature maps [b,d,h,w] for `kind` from an image batch [b,3,h,w].
template <typename T>
BasicTensor<T> features(const BasicTensor<T>& image, FeatureKind kind) {
  if (image.rank() != 4 || image.dim(1) != 3)
    throw ShapeError("convcrf: image must be [b,3,h,w], got " + shape_str(image.shape()));
  const std::size_t B = image.dim(0), H = image.dim(2), W = image.dim(3);
  const std::size_t D = kind == FeatureKind::Spatial ? 2 : 5;
  BasicTensor<T> f({B, D, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t x = 0; x < H; ++x)
      for (std::size_t y = 0; y < W; ++y) {
        f.at(b, 0, x, y) = static_cast<T>(x);
        f.at(b, 1, x, y) = static_cast<T>(y);
        if (D == 5)
          for (std::size_t c = 0; c < 3; ++c) f.at(b, 2 + c, x, y) = image.at(b, c, x, y);
      }
  return f;
}

/// Truncated Gaussian kernel matrix [b,k,k,h,w].
template <typename T>
BasicTensor<T> compute_kernel(const BasicTensor<T>& feats, std::span<const T> theta, std::size_t k) {
  require_odd_filter(k);
  if (feats.rank() != 4) throw ShapeError("compute_kernel: features must be [b,d,h,w], got " + shape_str(feats.shape()));
  const std::size_t B = feats.dim(0), D = feats.dim(1), H = feats.dim(2), W = feats.dim(3);
  if (theta.size() != D)
    throw ShapeError("compute_kernel: " + std::to_string(theta.size()) + " bandwidths for " + std::to_string(D) +
                     " feature dims");
  std::vector<T> inv(D);
  for (std::size_t i = 0; i < D; ++i) {
    if (!(theta[i] > T(0))) throw std::invalid_argument("compute_kernel: bandwidths must be positive");
    inv[i] = T(1) / (T(2) * theta[i] * theta[i]);
  }
  const long r = static_cast<long>(k / 2), h = static_cast<long>(H), w = static_cast<long>(W);
  BasicTensor<T> K({B, k, k, H, W});
  numerics::parallel_for(B * H, [&](std::size_t row) {
    const std::size_t b = row / H;
    const long x = static_cast<long>(row % H);
    std::vector<T> acc(W);
    for (long dx = -r; dx <= r; ++dx)
      for (long dy = -r; dy <= r; ++dy) {
        T* out = &K.at(b, static_cast<std::size_t>(dx + r), static_cast<std::size_t>(dy + r), 0, 0) + x * w;
        const long nx = x + dx;
        if (nx < 0 || nx >= h) continue;  // zero-initialized
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::size_t i = 0; i < D; ++i) {
          const T* f = &feats.at(b, i, 0, 0);
          for (long y = 0; y < w; ++y) {
            const long ny = y + dy;
            if (ny < 0 || ny >= w) continue;
            const T diff = f[x * w + y] - f[nx * w + ny];
            acc[y] += diff * diff * inv[i];
          }
        }
        for (long y = 0; y < w; ++y) {
          const long ny = y + dy;
          out[y] = (ny < 0 || ny >= w) ? T(0) : std::exp(-acc[y]);
        }
      }
  });
  numerics::check_finite(K, "compute_kernel");
  return K;
}

/// K = sum_i w_i g_i.
template <typename T>
BasicTensor<T> merge_kernels(std::span<const BasicTensor<T>> kernels, std::span<const T> weights) {
  if (kernels.empty() || kernels.size() != weights.size())
    throw ShapeError("merge_kernels: need one weight per kernel and at least one kernel");
  BasicTensor<T> K(kernels[0].shape());
  for (std::size_t s = 0; s < kernels.size(); ++s) {
    if (kernels[s].shape() != K.shape())
      throw ShapeError("merge_kernels: kernel " + std::to_string(s) + " has shape " + shape_str(kernels[s].shape()) +
                       ", expected " + shape_str(K.shape()));
    for (std::size_t i = 0; i < K.numel(); ++i) K[i] += weights[s] * kernels[s][i];
  }
  return K;
}

namespace detail {

inline void check_kernel_probs(const Shape& ks, const Shape& fs, const char* op) {
  if (ks.size() != 5 || fs.size() != 4 || ks[0] != fs[0] || ks[3] != fs[2] || ks[4] != fs[3] || ks[1] != ks[2])
    throw ShapeError(std::string(op) + ": kernel " + shape_str(ks) + " incompatible with map " + shape_str(fs));
  require_odd_filter(ks[1]);
}

// Calls fn(b, x, dx_index, dy_index, nx, dy, y_lo, y_hi) for every in-image (row, offset) run.
template <typename Fn>
void for_each_run(std::size_t B, std::size_t H, std::size_t W, std::size_t k, Fn&& fn) {
  const long r = static_cast<long>(k / 2), h = static_cast<long>(H), w = static_cast<long>(W);
  numerics::parallel_for(B * H, [&](std::size_t row) {
    const std::size_t b = row / H;
    const long x = static_cast<long>(row % H);
    for (long dx = -r; dx <= r; ++dx) {
      const long nx = x + dx;
      if (nx < 0 || nx >= h) continue;
      for (long dy = -r; dy <= r; ++dy) {
        const long lo = std::max(0L, -dy), hi = std::min(w, w - dy);
        fn(b, x, dx + r, dy + r, nx, dy, lo, hi);
      }
    }
  });
}

}  // namespace detail

/// Q[b,c,x,y] = sum_{dx,dy} K[b,dx,dy,x,y] F[b,c,x+dx,y+dy].
template <typename T>
BasicTensor<T> message_pass(const BasicTensor<T>& K, const BasicTensor<T>& F) {
  detail::check_kernel_probs(K.shape(), F.shape(), "message_pass");
  const std::size_t B = F.dim(0), C = F.dim(1), H = F.dim(2), W = F.dim(3), k = K.dim(1);
  BasicTensor<T> Q(F.shape());
  detail::for_each_run(B, H, W, k, [&](std::size_t b, long x, long ix, long iy, long nx, long dy, long lo, long hi) {
    const T* kr = &K.at(b, ix, iy, 0, 0) + x * static_cast<long>(W);
    for (std::size_t c = 0; c < C; ++c) {
      T* q = &Q.at(b, c, 0, 0) + x * static_cast<long>(W);
      const T* f = &F.at(b, c, 0, 0) + nx * static_cast<long>(W) + dy;
      for (long y = lo; y < hi; ++y) q[y] += kr[y] * f[y];
    }
  });
  numerics::check_finite(Q, "message_pass");
  return Q;
}

/// Per-pixel softmax over the class axis of [b,c,h,w].
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  BasicTensor<T> out(logits.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits[(b * C + c) * P + p]);
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) s += out[(b * C + c) * P + p] = std::exp(logits[(b * C + c) * P + p] - mx);
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * P + p] /= s;
    }
  return out;
}

/// Validates a probability map and returns log(F) with zero probabilities
/// floored at the smallest normal value of T.
template <typename T>
BasicTensor<T> unary_logits(const BasicTensor<T>& F) {
  if (F.rank() != 4) throw ShapeError("crf: probability map must be [b,c,h,w], got " + shape_str(F.shape()));
  const std::size_t B = F.dim(0), C = F.dim(1), P = F.dim(2) * F.dim(3);
  BasicTensor<T> u(F.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T v = F[(b * C + c) * P + p];
        if (!(v >= T(0))) throw std::invalid_argument("crf: probability map has negative or NaN entries");
        s += v;
      }
      if (!(s > T(0)))
        throw std::invalid_argument("crf: degenerate probability map (pixel " + std::to_string(p) +
                                    " has all-zero probabilities)");
      for (std::size_t c = 0; c < C; ++c)
        u[(b * C + c) * P + p] = std::log(std::max(F[(b * C + c) * P + p], std::numeric_limits<T>::min()));
    }
  return u;
}

template <typename T>
BasicTensor<T> merged_kernel(const BasicTensor<T>& image, std::span<const KernelSpec> specs, std::size_t k) {
  if (specs.empty()) throw std::invalid_argument("crf: at least one kernel spec required");
  std::vector<BasicTensor<T>> gs;
  std::vector<T> ws;
  for (const auto& s : specs) {
    s.validate();
    std::vector<T> th(s.theta.begin(), s.theta.end());
    gs.push_back(compute_kernel(features(image, s.kind), std::span<const T>(th), k));
    ws.push_back(static_cast<T>(s.weight));
  }
  return merge_kernels(std::span<const BasicTensor<T>>(gs), std::span<const T>(ws));
}

/// Mean-field refinement: Q <- softmax(log F + message_pass(K, Q)), starting
/// from Q = F. Returns a probability map of F's shape.
template <typename T>
BasicTensor<T> crf_refine(const BasicTensor<T>& F, const BasicTensor<T>& image, std::span<const KernelSpec> specs,
                          const CrfOptions& opt = {}) {
  if (opt.iterations < 1) throw std::invalid_argument("crf_refine: iterations must be >= 1");
  const auto unary = unary_logits(F);
  if (image.rank() != 4 || image.dim(0) != F.dim(0) || image.dim(2) != F.dim(2) || image.dim(3) != F.dim(3))
    throw ShapeError("crf_refine: image " + shape_str(image.shape()) + " does not match map " + shape_str(F.shape()));
  const auto K = merged_kernel(image, specs, opt.filter_size);
  BasicTensor<T> Q = F;
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    auto logits = message_pass(K, Q);
    logits += unary;
    Q = softmax_channels(logits);
  }
  numerics::check_finite(Q, "crf_refine");
  return Q;
}

// ---------------------------------------------------------------------------
// Traced counterparts used for fitting bandwidths and merge weights.

namespace ops {

/// Gaussian kernel with differentiable bandwidths theta [d]; features are constant.
template <typename T>
Var<T> gaussian_kernel(const BasicTensor<T>& feats, const Var<T>& theta, std::size_t k) {
  const auto& tv = theta.value();
  std::vector<T> th(tv.data().begin(), tv.data().end());
  auto K = compute_kernel(feats, std::span<const T>(th), k);
  const auto ti = theta.id(), ki = theta.tape().size();
  return theta.tape().record(
      std::move(K), theta.requires_grad(),
      [=, feats = feats](Tape<T>& t, const BasicTensor<T>& g) {
        // d g / d theta_i = g * diff_i^2 / theta_i^3
        const auto& Kv = t.value(ki);
        const std::size_t B = feats.dim(0), D = feats.dim(1), H = feats.dim(2), W = feats.dim(3);
        const long r = static_cast<long>(k / 2);
        std::vector<T> acc(D, T(0));
        for (std::size_t b = 0; b < B; ++b)
          for (long dx = -r; dx <= r; ++dx)
            for (long dy = -r; dy <= r; ++dy)
              for (long x = 0; x < static_cast<long>(H); ++x) {
                const long nx = x + dx;
                if (nx < 0 || nx >= static_cast<long>(H)) continue;
                for (long y = 0; y < static_cast<long>(W); ++y) {
                  const long ny = y + dy;
                  if (ny < 0 || ny >= static_cast<long>(W)) continue;
                  const std::size_t idx = (((b * k + (dx + r)) * k + (dy + r)) * H + x) * W + y;
                  const T gk = g[idx] * Kv[idx];
                  if (gk == T(0)) continue;
                  for (std::size_t i = 0; i < D; ++i) {
                    const T d = feats.at(b, i, x, y) - feats.at(b, i, nx, ny);
                    acc[i] += gk * d * d;
                  }
                }
              }
        auto& gt = t.grad_ref(ti);
        for (std::size_t i = 0; i < D; ++i) gt[i] += acc[i] / (th[i] * th[i] * th[i]);
      },
      "gaussian_kernel");
}

/// K = sum_s w[s] * kernels[s] with differentiable weights and kernels.
template <typename T>
Var<T> merge(std::span<const Var<T>> kernels, const Var<T>& w) {
  if (kernels.empty() || w.value().numel() != kernels.size())
    throw ShapeError("merge: need one weight per kernel and at least one kernel");
  std::vector<BasicTensor<T>> gs;
  for (const auto& kv : kernels) gs.push_back(kv.value());
  std::vector<T> ws(w.value().data().begin(), w.value().data().end());
  auto K = merge_kernels(std::span<const BasicTensor<T>>(gs), std::span<const T>(ws));
  std::vector<std::size_t> ids;
  bool rg = w.requires_grad();
  for (const auto& kv : kernels) {
    ids.push_back(kv.id());
    rg = rg || kv.requires_grad();
  }
  const auto wi = w.id();
  return w.tape().record(
      std::move(K), rg,
      [=](Tape<T>& t, const BasicTensor<T>& g) {
        for (std::size_t s = 0; s < ids.size(); ++s) {
          const auto& gv = t.value(ids[s]);
          T dw = 0;
          for (std::size_t i = 0; i < g.numel(); ++i) dw += g[i] * gv[i];
          if (t.requires_grad(wi)) t.grad_ref(wi)[s] += dw;
          if (t.requires_grad(ids[s])) {
            auto& gk = t.grad_ref(ids[s]);
            for (std::size_t i = 0; i < g.numel(); ++i) gk[i] += ws[s] * g[i];
          }
        }
      },
      "merge_kernels");
}

template <typename T>
Var<T> message_pass(const Var<T>& K, const Var<T>& F) {
  ag::detail::same_tape(K, F, "message_pass");
  const auto ki = K.id(), fi = F.id();
  const bool kg = K.requires_grad(), fg = F.requires_grad();
  return K.tape().record(
      convcrf::message_pass(K.value(), F.value()), kg || fg,
      [=](Tape<T>& t, const BasicTensor<T>& g) {
        const auto &Kv = t.value(ki), &Fv = t.value(fi);
        const std::size_t B = Fv.dim(0), C = Fv.dim(1), H = Fv.dim(2), W = Fv.dim(3), k = Kv.dim(1);
        BasicTensor<T>* gK = kg ? &t.grad_ref(ki) : nullptr;
        BasicTensor<T>* gF = fg ? &t.grad_ref(fi) : nullptr;
        // serial: dF rows receive contributions from several output rows
        const long r = static_cast<long>(k / 2), w = static_cast<long>(W);
        for (std::size_t b = 0; b < B; ++b)
          for (long x = 0; x < static_cast<long>(H); ++x)
            for (long dx = -r; dx <= r; ++dx) {
              const long nx = x + dx;
              if (nx < 0 || nx >= static_cast<long>(H)) continue;
              for (long dy = -r; dy <= r; ++dy) {
                const long lo = std::max(0L, -dy), hi = std::min(w, w - dy);
                const std::size_t koff = (((b * k + (dx + r)) * k + (dy + r)) * H + x) * W;
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t qoff = ((b * C + c) * H + x) * W;
                  const std::size_t foff = ((b * C + c) * H + nx) * W + dy;
                  for (long y = lo; y < hi; ++y) {
                    if (gK) (*gK)[koff + y] += g[qoff + y] * Fv[foff + y];
                    if (gF) (*gF)[foff + y] += Kv[koff + y] * g[qoff + y];
                  }
                }
              }
            }
      },
      "message_pass");
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const auto xi = x.id(), yi = x.tape().size();
  return x.tape().record(
      convcrf::softmax_channels(x.value()), x.requires_grad(),
      [=](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& y = t.value(yi);
        auto& gx = t.grad_ref(xi);
        const std::size_t B = y.dim(0), C = y.dim(1), P = y.dim(2) * y.dim(3);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p) {
            T dot = 0;
            for (std::size_t c = 0; c < C; ++c) dot += g[(b * C + c) * P + p] * y[(b * C + c) * P + p];
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = (b * C + c) * P + p;
              gx[i] += y[i] * (g[i] - dot);
            }
          }
      },
      "softmax_channels");
}

/// Mean pixelwise cross-entropy of Q [b,c,h,w] against class ids [b,h,w].
template <typename T>
Var<T> cross_entropy(const Var<T>& Q, const encoder::LabelMap& target) {
  const auto& q = Q.value();
  const std::size_t B = q.dim(0), C = q.dim(1), P = q.dim(2) * q.dim(3);
  if (target.rank() != 3 || target.dim(0) != B || target.dim(1) != q.dim(2) || target.dim(2) != q.dim(3))
    throw ShapeError("cross_entropy: target " + shape_str(target.shape()) + " does not match " + shape_str(q.shape()));
  const T floor = std::numeric_limits<T>::min();
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const auto c = static_cast<std::size_t>(target[b * P + p]);
      if (c >= C) throw std::invalid_argument("cross_entropy: target class out of range");
      loss -= std::log(std::max(q[(b * C + c) * P + p], floor));
    }
  const T n = static_cast<T>(B * P);
  const auto qi = Q.id();
  return Q.tape().record(
      BasicTensor<T>::scalar(loss / n), Q.requires_grad(),
      [=, target = target](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& qv = t.value(qi);
        auto& gq = t.grad_ref(qi);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (b * C + static_cast<std::size_t>(target[b * P + p])) * P + p;
            if (qv[i] > floor) gq[i] -= g[0] / (n * qv[i]);
          }
      },
      "cross_entropy");
}

/// Traced mean-field refinement with bandwidths exp(log_theta[s]) and merge
/// weights w [s].
template <typename T>
Var<T> refine(Tape<T>& tape, const BasicTensor<T>& F, const BasicTensor<T>& image, std::span<const KernelSpec> specs,
              std::span<const Var<T>> log_theta, const Var<T>& w, const CrfOptions& opt) {
  if (opt.iterations < 1) throw std::invalid_argument("crf_refine: iterations must be >= 1");
  auto unary = tape.constant(unary_logits(F));
  std::vector<Var<T>> gs;
  for (std::size_t s = 0; s < specs.size(); ++s)
    gs.push_back(gaussian_kernel(features(image, specs[s].kind), ag::exp(log_theta[s]), opt.filter_size));
  auto K = merge(std::span<const Var<T>>(gs), w);
  Var<T> Q = tape.constant(F);
  for (std::size_t it = 0; it < opt.iterations; ++it) Q = softmax_channels(ag::add(message_pass(K, Q), unary));
  return Q;
}

}  // namespace ops

struct TrainResult {
  std::vector<KernelSpec> specs;
  std::vector<double> loss_trace;  // loss of the accepted parameters, one entry per step plus the initial value
};

/// Fits bandwidths and merge weights by gradient descent on the pixelwise
/// cross-entropy between crf_refine(F) and `target` (class ids [b,h,w]).
template <typename T>
TrainResult train_crf(const BasicTensor<T>& F, const BasicTensor<T>& image, const encoder::LabelMap& target,
                      std::span<const KernelSpec> specs, std::size_t steps, double lr, const CrfOptions& opt = {}) {
  if (target.rank() != 3 || F.rank() != 4 || target.dim(1) != F.dim(2) || target.dim(2) != F.dim(3))
    throw ShapeError("train_crf: target " + shape_str(target.shape()) + " does not match map " + shape_str(F.shape()));
  if (!(lr > 0.0)) throw std::invalid_argument("train_crf: learning rate must be positive");
  for (const auto& s : specs) s.validate();

  std::vector<BasicTensor<T>> log_theta;
  BasicTensor<T> w({specs.size()});
  for (std::size_t s = 0; s < specs.size(); ++s) {
    BasicTensor<T> lt({specs[s].theta.size()});
    for (std::size_t i = 0; i < lt.numel(); ++i) lt[i] = static_cast<T>(std::log(specs[s].theta[i]));
    log_theta.push_back(std::move(lt));
    w[s] = static_cast<T>(specs[s].weight);
  }

  struct Eval {
    T loss;
    std::vector<BasicTensor<T>> g_theta;
    BasicTensor<T> g_w;
  };
  auto evaluate = [&](const std::vector<BasicTensor<T>>& lth, const BasicTensor<T>& wv) {
    Tape<T> tape;
    std::vector<Var<T>> th;
    for (const auto& l : lth) th.push_back(tape.parameter(l));
    auto wvar = tape.parameter(wv);
    auto loss = ops::cross_entropy(ops::refine(tape, F, image, specs, std::span<const Var<T>>(th), wvar, opt), target);
    if (!std::isfinite(loss.value()[0])) throw NumericError("train_crf: non-finite loss");
    tape.backward(loss);
    Eval e{loss.value()[0], {}, wvar.grad()};
    for (const auto& v : th) e.g_theta.push_back(v.grad());
    return e;
  };

  auto current = evaluate(log_theta, w);
  TrainResult result;
  result.loss_trace.push_back(static_cast<double>(current.loss));
  T step = static_cast<T>(lr);
  for (std::size_t it = 0; it < steps; ++it) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      auto lth = log_theta;
      auto wv = w;
      for (std::size_t s = 0; s < lth.size(); ++s)
        for (std::size_t i = 0; i < lth[s].numel(); ++i) lth[s][i] -= step * current.g_theta[s][i];
      for (std::size_t s = 0; s < wv.numel(); ++s) wv[s] -= step * current.g_w[s];
      auto next = evaluate(lth, wv);
      if (next.loss <= current.loss) {
        log_theta = std::move(lth);
        w = std::move(wv);
        current = std::move(next);
        break;
      }
      step /= T(2);
    }
    result.loss_trace.push_back(static_cast<double>(current.loss));
  }

  for (std::size_t s = 0; s < specs.size(); ++s) {
    KernelSpec k = specs[s];
    for (std::size_t i = 0; i < k.theta.size(); ++i) k.theta[i] = std::exp(static_cast<double>(log_theta[s][i]));
    k.weight = static_cast<double>(w[s]);
    result.specs.push_back(std::move(k));
  }
  return result;
}

}  // namespace dclr::convcrf
