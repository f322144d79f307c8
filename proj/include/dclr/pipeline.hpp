#pragma once

// Whole-slide orchestration: tissue detection, tiling, patch labels,
// contrastive pretraining, embedding clustering, stitching and metrics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dclr/augment.hpp"
#include "dclr/contrastive.hpp"
#include "dclr/encoder.hpp"
#include "dclr/image.hpp"
#include "dclr/io/png.hpp"
#include "dclr/numerics/sgd.hpp"
#include "dclr/random.hpp"

namespace dclr::pipeline {

// Class channel order used by probability maps.
inline constexpr std::size_t kNonTumour = 0;
inline constexpr std::size_t kTumour = 1;

// ---------------------------------------------------------------------------
// Tissue and tiling

/// Tissue = pixels whose mean channel intensity is at most `threshold`.
inline Mask remove_background(const Tensor& image, double threshold) {
  image::require_chw(image, "remove_background");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("remove_background: threshold must lie in (0,1)");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), P = H * W;
  Mask m({H, W});
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += image[c * P + p];
    m[p] = (s / static_cast<double>(C) > threshold) ? 0 : 1;
  }
  return m;
}

struct Placement {
  std::size_t row, col, y0, x0;
};

struct PatchSet {
  std::vector<Tensor> patches;
  std::vector<Placement> grid;
  std::size_t side = 0, stride = 0;
};

/// Raster-scan tiling; keeps tiles with at least `min_tissue` tissue fraction.
inline PatchSet extract_patches(const Tensor& image, const Mask& tissue, std::size_t side, std::size_t stride,
                                double min_tissue = 0.25) {
  image::require_chw(image, "extract_patches");
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (side == 0 || side > std::min(H, W)) throw std::invalid_argument("extract_patches: patch side must be in [1, min(H,W)]");
  if (stride < 1) throw std::invalid_argument("extract_patches: stride must be >= 1");
  if (tissue.shape() != Shape{H, W}) throw ShapeError("extract_patches: tissue mask does not match image");
  PatchSet out{{}, {}, side, stride};
  for (std::size_t y0 = 0, r = 0; y0 + side <= H; y0 += stride, ++r)
    for (std::size_t x0 = 0, c = 0; x0 + side <= W; x0 += stride, ++c) {
      std::size_t n = 0;
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) n += tissue.at(y, x);
      if (static_cast<double>(n) < min_tissue * static_cast<double>(side * side)) continue;
      out.patches.push_back(image::crop(image, y0, x0, side, side));
      out.grid.push_back({r, c, y0, x0});
    }
  return out;
}

enum class PatchLabel { NonTumour, Tumour, Excluded };

/// Tumour if the tumour fraction reaches `ratio`, non-tumour if the
/// non-tumour fraction does, otherwise excluded.
inline PatchLabel label_patch(const Mask& annotation, const Placement& at, std::size_t side, double ratio = 0.75) {
  if (at.y0 + side > annotation.dim(0) || at.x0 + side > annotation.dim(1))
    throw ShapeError("label_patch: patch outside annotation");
  std::size_t n = 0;
  for (std::size_t y = at.y0; y < at.y0 + side; ++y)
    for (std::size_t x = at.x0; x < at.x0 + side; ++x) n += annotation.at(y, x) ? 1 : 0;
  const double frac = static_cast<double>(n) / static_cast<double>(side * side);
  if (frac >= ratio) return PatchLabel::Tumour;
  if (1.0 - frac >= ratio) return PatchLabel::NonTumour;
  return PatchLabel::Excluded;
}

// ---------------------------------------------------------------------------
// Contrastive pretraining

struct PretrainConfig {
  encoder::DUNetConfig encoder;
  augment::Policy policy = augment::default_policy();
  double temperature = 0.5;
  double lr = 0.001;
  double momentum = 0.0;
  std::size_t batch = 64;
  std::size_t patience = 20;
  std::size_t max_epochs = 15;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double val_loss;
};

struct PretrainResult {
  encoder::EncoderModel<float> model;
  std::vector<EpochRecord> trace;
  std::size_t best_epoch = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::uint64_t view_stream(std::size_t patch, std::size_t epoch) {
  return splitmix64((static_cast<std::uint64_t>(epoch) << 40) ^ patch);
}

inline double batch_loss(const encoder::EncoderModel<float>& model, const contrastive::ContrastiveBatch& batch,
                         bool train, std::vector<Tensor>* grads) {
  Tape<float> tape;
  auto bound = encoder::bind(tape, model, train);
  auto z = encoder::project(encoder::encode(tape.constant(batch.views), bound), bound);
  auto loss = contrastive::nt_xent(z, std::span<const std::size_t>(batch.partner), static_cast<float>(batch.temperature));
  const double value = loss.value()[0];
  if (train && std::isfinite(value)) {
    tape.backward(loss);
    grads->clear();
    for (const auto& v : bound.vars) grads->push_back(v.grad());
  }
  return value;
}
}  // namespace detail

using ProgressFn = std::function<void(const EpochRecord&)>;

/// SGD on NT-Xent over two-view batches. A held-out slice of the patches gives
/// the validation contrastive loss that drives early stopping; the returned
/// model is the one with the best validation loss.
inline PretrainResult pretrain(std::span<const Tensor> patches, const PretrainConfig& cfg,
                               const ProgressFn& progress = {}) {
  cfg.encoder.validate();
  if (cfg.batch < 2) throw std::invalid_argument("pretrain: batch size must be >= 2");
  if (patches.size() < cfg.batch)
    throw std::invalid_argument("pretrain: need at least batch=" + std::to_string(cfg.batch) + " patches, got " +
                                std::to_string(patches.size()));
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("pretrain: learning rate must be positive");

  augment::Policy policy = cfg.policy;
  policy.out_h = policy.out_w = cfg.encoder.input_side;

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = make_rng(cfg.seed, "pretrain.split");
  shuffle(order.begin(), order.end(), split_rng);
  std::size_t n_val = static_cast<std::size_t>(std::lround(cfg.val_fraction * patches.size()));
  if (n_val == 1) n_val = 2;
  if (patches.size() - n_val < 2) n_val = 0;
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());

  PretrainResult res{encoder::init_model<float>(cfg.encoder, cfg.seed), {}, 0};
  auto model = res.model;
  std::vector<Tensor> velocity;
  for (const auto& p : model.params) velocity.push_back(Tensor::zeros(p.shape()));

  auto make_batch = [&](std::span<const std::size_t> idx, std::size_t epoch) {
    std::vector<Tensor> xs;
    std::vector<std::uint64_t> ids;
    for (auto i : idx) {
      xs.push_back(patches[i]);
      ids.push_back(detail::view_stream(i, epoch));
    }
    return contrastive::build_batch(xs, ids, policy, derive_seed(cfg.seed, "pretrain.augment"), cfg.temperature);
  };

  auto validation_loss = [&](const encoder::EncoderModel<float>& m) {
    if (val_idx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double total = 0;
    std::size_t count = 0;
    for (std::size_t lo = 0; lo < val_idx.size(); lo += cfg.batch) {
      const std::size_t hi = std::min(val_idx.size(), lo + cfg.batch);
      if (hi - lo < 2) break;
      // fixed views every epoch so the monitor is comparable across epochs
      auto batch = make_batch(std::span<const std::size_t>(val_idx).subspan(lo, hi - lo), 0);
      total += detail::batch_loss(m, batch, false, nullptr) * static_cast<double>(hi - lo);
      count += hi - lo;
    }
    return total / static_cast<double>(count);
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<Tensor> grads;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, "pretrain.shuffle", {epoch});
    shuffle(train_idx.begin(), train_idx.end(), rng);
    double total = 0;
    std::size_t seen = 0;
    for (std::size_t lo = 0; lo + 2 <= train_idx.size(); lo += cfg.batch) {
      const std::size_t hi = std::min(train_idx.size(), lo + cfg.batch);
      if (hi - lo < 2) break;
      auto batch = make_batch(std::span<const std::size_t>(train_idx).subspan(lo, hi - lo), epoch);
      auto diverged = [&](const std::string& why) {
        return TrainingError("pretrain: " + why + " in epoch " + std::to_string(epoch) + "; last good epoch " +
                             std::to_string(epoch - 1));
      };
      double loss;
      try {
        loss = detail::batch_loss(model, batch, true, &grads);
      } catch (const std::domain_error& e) {  // collapsed embedding
        throw diverged(e.what());
      } catch (const NumericError& e) {
        throw diverged(e.what());
      }
      if (!std::isfinite(loss)) throw diverged("non-finite loss");
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        if (cfg.momentum > 0.0) {
          velocity[i] *= static_cast<float>(cfg.momentum);
          velocity[i] += grads[i];
          numerics::sgd_step(model.params[i], velocity[i], static_cast<float>(cfg.lr));
        } else {
          numerics::sgd_step(model.params[i], grads[i], static_cast<float>(cfg.lr));
        }
      }
      total += loss * static_cast<double>(hi - lo);
      seen += hi - lo;
    }
    double val;
    try {
      val = validation_loss(model);
    } catch (const std::domain_error& e) {
      throw TrainingError(std::string("pretrain: validation ") + e.what() + " after epoch " + std::to_string(epoch) +
                          "; last good epoch " + std::to_string(epoch - 1));
    }
    EpochRecord rec{epoch, total / static_cast<double>(seen), val};
    res.trace.push_back(rec);
    if (progress) progress(rec);
    const double monitor = std::isnan(rec.val_loss) ? rec.train_loss : rec.val_loss;
    if (monitor < best) {
      best = monitor;
      since_best = 0;
      res.model = model;
      res.best_epoch = epoch;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) break;
  }
  return res;
}

/// h = f(patch) for every patch, resized to the encoder input side.
inline Tensor embed(std::span<const Tensor> patches, const encoder::EncoderModel<float>& model,
                    std::size_t batch = 64) {
  const std::size_t s = model.config.input_side, d = model.config.embed_dim;
  Tensor out({std::max<std::size_t>(patches.size(), 1), d});
  for (std::size_t lo = 0; lo < patches.size(); lo += batch) {
    const std::size_t hi = std::min(patches.size(), lo + batch);
    std::vector<Tensor> xs;
    for (std::size_t i = lo; i < hi; ++i)
      xs.push_back(patches[i].dim(1) == s && patches[i].dim(2) == s ? patches[i]
                                                                    : image::resize_bilinear(patches[i], s, s));
    const auto h = encoder::encode(image::stack(xs), model);
    std::copy(h.data().begin(), h.data().end(), out.data().begin() + lo * d);
  }
  return out;
}

inline void l2_normalize_rows(Tensor& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += double(x.at(i, j)) * x.at(i, j);
    s = std::sqrt(s);
    if (s > 0)
      for (std::size_t j = 0; j < d; ++j) x.at(i, j) = static_cast<float>(x.at(i, j) / s);
  }
}

// ---------------------------------------------------------------------------
// Clustering

struct Clustering {
  std::vector<std::size_t> assignment;
  Tensor centroids;  // [k,d]
  double inertia = 0;
};

namespace detail {
inline double sqdist(const float* a, const float* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = double(a[j]) - b[j];
    s += t * t;
  }
  return s;
}
}  // namespace detail

/// Nearest-centroid assignment of each row.
inline std::vector<std::size_t> assign(const Tensor& x, const Tensor& centroids) {
  const std::size_t n = x.dim(0), d = x.dim(1), k = centroids.dim(0);
  std::vector<std::size_t> a(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = detail::sqdist(&x.at(i, 0), &centroids.at(c, 0), d);
      if (dd < best) best = dd, a[i] = c;
    }
  }
  return a;
}

/// k-means with k-means++ seeding; best of `restarts` runs by within-cluster
/// sum of squares.
inline Clustering kmeans(const Tensor& x, std::size_t k, std::size_t restarts, std::uint64_t seed,
                         std::size_t max_iter = 100) {
  if (x.rank() != 2) throw ShapeError("kmeans: expected [n,d] embeddings, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k < 1 || n < k) throw std::invalid_argument("kmeans: need n >= k >= 1");
  {
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.emplace_back(&x.at(i, 0), &x.at(i, 0) + d);
    std::sort(rows.begin(), rows.end());
    if (static_cast<std::size_t>(std::unique(rows.begin(), rows.end()) - rows.begin()) < k)
      throw std::invalid_argument("kmeans: fewer than k distinct points");
  }
  Clustering best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t run = 0; run < std::max<std::size_t>(restarts, 1); ++run) {
    Rng rng = make_rng(seed, "kmeans", {run});
    Tensor cent({k, d});
    std::vector<double> mind(n, std::numeric_limits<double>::infinity());
    std::size_t first = uniform_index(rng, n);
    std::copy_n(&x.at(first, 0), d, &cent.at(0, 0));
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mind[i] = std::min(mind[i], detail::sqdist(&x.at(i, 0), &cent.at(c - 1, 0), d));
        total += mind[i];
      }
      double target = uniform01(rng) * total, acc = 0;
      std::size_t pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += mind[i];
        if (acc > target && mind[i] > 0) {
          pick = i;
          break;
        }
      }
      while (mind[pick] == 0 && pick > 0) --pick;
      std::copy_n(&x.at(pick, 0), d, &cent.at(c, 0));
    }
    std::vector<std::size_t> a;
    for (std::size_t it = 0; it < max_iter; ++it) {
      auto next = assign(x, cent);
      if (next == a) break;
      a = std::move(next);
      Tensor sum({k, d});
      std::vector<std::size_t> cnt(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++cnt[a[i]];
        for (std::size_t j = 0; j < d; ++j) sum.at(a[i], j) += x.at(i, j);
      }
      for (std::size_t c = 0; c < k; ++c)
        if (cnt[c] > 0)
          for (std::size_t j = 0; j < d; ++j) cent.at(c, j) = sum.at(c, j) / static_cast<float>(cnt[c]);
    }
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i) inertia += detail::sqdist(&x.at(i, 0), &cent.at(a[i], 0), d);
    if (inertia < best.inertia) best = {a, cent, inertia};
  }
  return best;
}

/// Soft two-way membership from centroid distances: p(c) = d_other / (d_c + d_other).
/// Returns [n,2] with columns (cluster 0, cluster 1).
inline Tensor cluster_probabilities(const Tensor& x, const Tensor& centroids) {
  if (centroids.dim(0) != 2) throw std::invalid_argument("cluster_probabilities: expects two centroids");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor p({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double d0 = std::sqrt(detail::sqdist(&x.at(i, 0), &centroids.at(0, 0), d));
    const double d1 = std::sqrt(detail::sqdist(&x.at(i, 0), &centroids.at(1, 0), d));
    const double s = d0 + d1;
    p.at(i, 0) = s > 0 ? static_cast<float>(d1 / s) : 0.5f;
    p.at(i, 1) = 1.0f - p.at(i, 0);
  }
  return p;
}

/// Soft two-way membership from the position along the centroid axis:
/// p(1) = clamp(<x - c0, c1 - c0> / |c1 - c0|^2, 0, 1). A patch whose
/// embedding sits a fraction f of the way from c0 to c1 gets p(1) = f.
inline Tensor axis_probabilities(const Tensor& x, const Tensor& centroids) {
  if (centroids.dim(0) != 2) throw std::invalid_argument("axis_probabilities: expects two centroids");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const double len2 = detail::sqdist(&centroids.at(0, 0), &centroids.at(1, 0), d);
  Tensor p({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    double t = 0.5;
    if (len2 > 0) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j)
        dot += (double(x.at(i, j)) - centroids.at(0, j)) * (double(centroids.at(1, j)) - centroids.at(0, j));
      t = std::clamp(dot / len2, 0.0, 1.0);
    }
    p.at(i, 1) = static_cast<float>(t);
    p.at(i, 0) = 1.0f - p.at(i, 1);
  }
  return p;
}

/// Mean luma of the patches assigned to each of k clusters.
inline std::vector<double> cluster_luma(std::span<const Tensor> patches, std::span<const std::size_t> assignment,
                                        std::size_t k) {
  std::vector<double> sum(k, 0.0), cnt(k, 0.0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const std::size_t P = p.dim(1) * p.dim(2);
    double l = 0;
    for (std::size_t q = 0; q < P; ++q) l += image::luma(p[q], p[P + q], p[2 * P + q]);
    sum[assignment[i]] += l / static_cast<double>(P);
    cnt[assignment[i]] += 1;
  }
  for (std::size_t c = 0; c < k; ++c) sum[c] = cnt[c] > 0 ? sum[c] / cnt[c] : std::numeric_limits<double>::infinity();
  return sum;
}

// ---------------------------------------------------------------------------
// Stitching and metrics

/// Probability map [1,c,H,W]: each pixel averages the probabilities of every
/// patch covering it; uncovered pixels are non-tumour with certainty.
inline Tensor stitch(std::size_t H, std::size_t W, std::span<const Placement> grid, std::size_t side,
                     const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(0) != grid.size())
    throw ShapeError("stitch: probabilities " + shape_str(probs.shape()) + " do not match " +
                     std::to_string(grid.size()) + " patches");
  const std::size_t C = probs.dim(1), P = H * W;
  Tensor out({1, C, H, W});
  std::vector<float> cover(P, 0.0f);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& g = grid[i];
    if (g.y0 + side > H || g.x0 + side > W) throw ShapeError("stitch: patch outside the slide");
    for (std::size_t y = g.y0; y < g.y0 + side; ++y)
      for (std::size_t x = g.x0; x < g.x0 + side; ++x) {
        cover[y * W + x] += 1.0f;
        for (std::size_t c = 0; c < C; ++c) out[c * P + y * W + x] += probs.at(i, c);
      }
  }
  for (std::size_t p = 0; p < P; ++p) {
    if (cover[p] > 0)
      for (std::size_t c = 0; c < C; ++c) out[c * P + p] /= cover[p];
    else
      out[kNonTumour * P + p] = 1.0f;
  }
  return out;
}

/// Binary mask of pixels whose tumour probability exceeds 0.5.
inline Mask tumour_mask(const Tensor& probmap) {
  if (probmap.rank() != 4 || probmap.dim(0) != 1 || probmap.dim(1) < 2)
    throw ShapeError("tumour_mask: expected [1,c,H,W], got " + shape_str(probmap.shape()));
  const std::size_t H = probmap.dim(2), W = probmap.dim(3), P = H * W;
  Mask m({H, W});
  for (std::size_t p = 0; p < P; ++p) m[p] = probmap[kTumour * P + p] > probmap[kNonTumour * P + p] ? 1 : 0;
  return m;
}

/// 2|A∩B| / (|A| + |B|); 1 when both are empty.
inline double dice(const Mask& pred, const Mask& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("dice: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (pred[i] > 1 || truth[i] > 1) throw std::invalid_argument("dice: masks must be binary");
    a += pred[i];
    b += truth[i];
    both += pred[i] & truth[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Fraction of matches, maximised over relabelings of the predicted labels.
inline double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (pred.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t k = 0;
  for (auto v : pred) k = std::max(k, v + 1);
  for (auto v : truth) k = std::max(k, v + 1);
  if (k > 8) throw std::invalid_argument("accuracy: permutation matching supports at most 8 labels");
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t best = 0;
  do {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += perm[pred[i]] == truth[i];
    best = std::max(best, hit);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(pred.size());
}

}  // namespace dclr::pipeline
