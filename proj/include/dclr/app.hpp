#pragma once

// The five pipeline stages as file-to-file commands. Each stage reads the
// previous stage's directory, writes its own, and drops the resolved config
// next to its outputs. All tables carry a versioned first line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dclr/config.hpp"
#include "dclr/convcrf.hpp"
#include "dclr/datagen.hpp"
#include "dclr/io/png.hpp"
#include "dclr/numerics/dten.hpp"
#include "dclr/numerics/parallel.hpp"
#include "dclr/pipeline.hpp"

namespace dclr::app {

namespace fs = std::filesystem;
using config::RunConfig;

inline constexpr const char* kDatasetHeader = "# dclr-dataset v1";
inline constexpr const char* kTraceHeader = "# dclr-trace v1";
inline constexpr const char* kClustersHeader = "# dclr-clusters v1";
inline constexpr const char* kSegmentHeader = "# dclr-segment v1";
inline constexpr const char* kPatchesHeader = "# dclr-patches v1";
inline constexpr const char* kRefineHeader = "# dclr-refine v1";
inline constexpr const char* kMetricsHeader = "# dclr-metrics v1";
inline constexpr const char* kSummaryHeader = "# dclr-summary v1";

namespace detail {

using Row = std::vector<std::string>;

inline std::string fixed(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw FormatError("cannot write " + p.string());
  return os;
}

inline void write_table(const fs::path& p, const char* header, const Row& columns, const std::vector<Row>& rows) {
  auto os = open_out(p);
  os << header << '\n';
  auto line = [&](const Row& r) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "\t" : "") << r[i];
    os << '\n';
  };
  line(columns);
  for (const auto& r : rows) line(r);
}

/// Reads a table written by write_table, checking header and column names.
inline std::vector<Row> read_table(const fs::path& p, const char* header, const Row& columns) {
  std::ifstream is(p);
  if (!is) throw FormatError("missing file " + p.string());
  std::string line;
  if (!std::getline(is, line) || line != header)
    throw FormatError(p.string() + ": expected header '" + header + "'");
  auto split = [](const std::string& s) {
    Row r;
    std::stringstream ss(s);
    for (std::string f; std::getline(ss, f, '\t');) r.push_back(f);
    return r;
  };
  if (!std::getline(is, line) || split(line) != columns) throw FormatError(p.string() + ": unexpected columns");
  std::vector<Row> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto r = split(line);
    if (r.size() != columns.size())
      throw FormatError(p.string() + ": row with " + std::to_string(r.size()) + " fields, expected " +
                        std::to_string(columns.size()));
    rows.push_back(std::move(r));
  }
  return rows;
}

template <typename T>
T number(const std::string& s, const fs::path& where) {
  T v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw FormatError(where.string() + ": bad number '" + s + "'");
  return v;
}

inline void prepare(const RunConfig& cfg, const fs::path& out) {
  config::validate(cfg);
  numerics::set_threads(cfg.threads);
  fs::create_directories(out);
  config::write(cfg, out / "config.txt");
}

}  // namespace detail

struct SlideEntry {
  std::string id, split;
  std::uint64_t seed = 0;
  fs::path image, mask;
};

inline const detail::Row kDatasetColumns{"id", "split", "seed", "image", "mask"};

inline std::vector<SlideEntry> read_dataset(const fs::path& dir) {
  std::vector<SlideEntry> out;
  const auto manifest = dir / "manifest.tsv";
  for (const auto& r : detail::read_table(manifest, kDatasetHeader, kDatasetColumns))
    out.push_back({r[0], r[1], detail::number<std::uint64_t>(r[2], manifest), dir / r[3], dir / r[4]});
  return out;
}

/// Synthetic slides as PNG image/mask pairs plus a manifest.
inline void cmd_gen(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = cfg.dir("data");
  detail::prepare(cfg, out);
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  auto params = cfg.synth;
  params.seed = derive_seed(cfg.seed, "datagen");
  const auto ds = datagen::synth_dataset(cfg.slides, params, cfg.split);
  std::vector<detail::Row> rows;
  for (const auto* part : {&ds.train, &ds.test})
    for (const auto& s : *part) {
      const std::string img = "images/" + s.id + ".png", mask = "masks/" + s.id + ".png";
      png::write_rgb(out / img, s.image);
      png::write_mask(out / mask, s.truth);
      rows.push_back({s.id, part == &ds.train ? "train" : "test", std::to_string(s.seed), img, mask});
    }
  std::sort(rows.begin(), rows.end());
  detail::write_table(out / "manifest.tsv", kDatasetHeader, kDatasetColumns, rows);
  log << "gen: " << ds.train.size() << " train + " << ds.test.size() << " test slides -> " << out.string() << '\n';
}

namespace detail {
inline pipeline::PatchSet slide_patches(const Tensor& image, const RunConfig& cfg, std::size_t stride) {
  const auto tissue = pipeline::remove_background(image, cfg.pipeline.background_threshold);
  return pipeline::extract_patches(image, tissue, cfg.pipeline.patch_side, stride, cfg.pipeline.min_tissue);
}

inline std::vector<Tensor> training_patches(const RunConfig& cfg) {
  std::vector<Tensor> all;
  for (const auto& e : read_dataset(cfg.dir("data"))) {
    if (e.split != "train") continue;
    auto ps = slide_patches(png::read_rgb(e.image), cfg, cfg.pipeline.train_stride);
    for (auto& p : ps.patches) all.push_back(std::move(p));
  }
  return all;
}
}  // namespace detail

/// Contrastive pretraining on the training slides' patches.
inline void cmd_pretrain(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = cfg.dir("model");
  detail::prepare(cfg, out);
  const auto patches = detail::training_patches(cfg);
  log << "pretrain: " << patches.size() << " patches\n";
  std::vector<detail::Row> rows;
  auto res = pipeline::pretrain(patches, cfg.pretrain(), [&](const pipeline::EpochRecord& r) {
    log << "pretrain: epoch " << r.epoch << " train " << detail::fixed(r.train_loss) << " val "
        << detail::fixed(r.val_loss) << '\n';
    rows.push_back({std::to_string(r.epoch), detail::fixed(r.train_loss), detail::fixed(r.val_loss)});
  });
  encoder::save_checkpoint(out / "checkpoint", res.model);
  detail::write_table(out / "trace.tsv", kTraceHeader, {"epoch", "train_loss", "val_loss"}, rows);
  log << "pretrain: best epoch " << res.best_epoch << " -> " << out.string() << '\n';
}

inline const detail::Row kSegmentColumns{"id", "n_patches"};
inline const detail::Row kPatchColumns{"y0", "x0", "side", "cluster", "p_tumour"};

/// Clusters training-patch embeddings, then tiles, embeds and stitches each
/// selected slide into a tumour probability map.
inline void cmd_segment(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = cfg.dir("segment");
  detail::prepare(cfg, out);
  const auto model = encoder::load_checkpoint(cfg.dir("model") / "checkpoint");

  const auto train = detail::training_patches(cfg);
  auto h = pipeline::embed(train, model);
  pipeline::l2_normalize_rows(h);
  const auto clusters = pipeline::kmeans(h, 2, cfg.pipeline.kmeans_restarts, derive_seed(cfg.seed, "kmeans"));
  std::size_t tumour = 0;
  if (cfg.pipeline.tumour_cluster == "darker") {
    const auto luma = pipeline::cluster_luma(train, clusters.assignment, 2);
    tumour = luma[1] < luma[0] ? 1 : 0;
  } else {
    tumour = cfg.pipeline.tumour_cluster == "1" ? 1 : 0;
  }
  dten::save(out / "centroids.dten", clusters.centroids);
  {
    auto os = detail::open_out(out / "clusters.txt");
    os << kClustersHeader << "\ntumour_cluster = " << tumour << "\ninertia = " << detail::fixed(clusters.inertia)
       << '\n';
  }

  std::vector<detail::Row> index;
  for (const auto& e : read_dataset(cfg.dir("data"))) {
    if (cfg.pipeline.segment_split != "all" && e.split != cfg.pipeline.segment_split) continue;
    const auto image = png::read_rgb(e.image);
    const std::size_t H = image.dim(1), W = image.dim(2);
    const auto ps = detail::slide_patches(image, cfg, cfg.pipeline.segment_stride);
    Tensor map({1, 2, H, W});
    std::vector<detail::Row> rows;
    if (ps.patches.empty()) {
      for (std::size_t p = 0; p < H * W; ++p) map[p] = 1.0f;
    } else {
      auto he = pipeline::embed(ps.patches, model);
      pipeline::l2_normalize_rows(he);
      const auto assigned = pipeline::assign(he, clusters.centroids);
      const auto pc = cfg.pipeline.probability == "axis" ? pipeline::axis_probabilities(he, clusters.centroids)
                                                         : pipeline::cluster_probabilities(he, clusters.centroids);
      Tensor probs({ps.patches.size(), 2});
      for (std::size_t i = 0; i < ps.patches.size(); ++i) {
        probs.at(i, pipeline::kTumour) = pc.at(i, tumour);
        probs.at(i, pipeline::kNonTumour) = pc.at(i, 1 - tumour);
        rows.push_back({std::to_string(ps.grid[i].y0), std::to_string(ps.grid[i].x0), std::to_string(ps.side),
                        std::to_string(assigned[i]), detail::fixed(probs.at(i, pipeline::kTumour))});
      }
      map = pipeline::stitch(H, W, ps.grid, ps.side, probs);
    }
    dten::save(out / (e.id + ".probmap.dten"), map);
    png::write_mask(out / (e.id + ".mask.png"), pipeline::tumour_mask(map));
    detail::write_table(out / (e.id + ".patches.tsv"), kPatchesHeader, kPatchColumns, rows);
    index.push_back({e.id, std::to_string(ps.patches.size())});
    log << "segment: " << e.id << " " << ps.patches.size() << " patches\n";
  }
  if (index.empty()) throw FormatError("segment: no slides in split '" + cfg.pipeline.segment_split + "'");
  detail::write_table(out / "index.tsv", kSegmentHeader, kSegmentColumns, index);
}

/// ConvCRF mean-field refinement of every segmented probability map.
inline void cmd_refine(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = cfg.dir("refine"), seg = cfg.dir("segment");
  detail::prepare(cfg, out);
  std::map<std::string, fs::path> images;
  for (const auto& e : read_dataset(cfg.dir("data"))) images[e.id] = e.image;
  const auto specs = cfg.crf.kernels();
  std::vector<detail::Row> index;
  for (const auto& r : detail::read_table(seg / "index.tsv", kSegmentHeader, kSegmentColumns)) {
    const auto& id = r[0];
    if (!images.count(id)) throw FormatError("refine: slide " + id + " not in dataset manifest");
    const auto image = png::read_rgb(images[id]);
    const auto F = dten::load(seg / (id + ".probmap.dten"));
    const Shape want{1, 2, image.dim(1), image.dim(2)};
    if (F.shape() != want)
      throw ShapeError("refine: " + id + " probmap " + shape_str(F.shape()) + " does not match image, expected " +
                       shape_str(want));
    const auto Q = convcrf::crf_refine(F, image.reshaped({1, 3, image.dim(1), image.dim(2)}),
                                       std::span<const convcrf::KernelSpec>(specs), cfg.crf.options());
    dten::save(out / (id + ".probmap.dten"), Q);
    png::write_mask(out / (id + ".mask.png"), pipeline::tumour_mask(Q));
    index.push_back({id});
    log << "refine: " << id << '\n';
  }
  detail::write_table(out / "index.tsv", kRefineHeader, {"id"}, index);
}

struct SlideMetrics {
  std::string id;
  double dice_pre = 0, dice_post = std::numeric_limits<double>::quiet_NaN();
  std::size_t patches = 0;
};

struct Metrics {
  std::vector<SlideMetrics> slides;
  std::size_t labelled_patches = 0;
  double patch_accuracy = std::numeric_limits<double>::quiet_NaN();
  double dice_pre = 0, dice_post = std::numeric_limits<double>::quiet_NaN();
};

/// Dice before/after refinement and permutation-matched patch accuracy
/// against the ground-truth masks.
inline Metrics cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const fs::path out = cfg.dir("eval"), seg = cfg.dir("segment"), ref = cfg.dir("refine");
  detail::prepare(cfg, out);
  std::map<std::string, fs::path> truth;
  for (const auto& e : read_dataset(cfg.dir("data"))) truth[e.id] = e.mask;
  const bool refined = fs::exists(ref / "index.tsv");
  std::map<std::string, bool> has_refined;
  if (refined)
    for (const auto& r : detail::read_table(ref / "index.tsv", kRefineHeader, {"id"})) has_refined[r[0]] = true;

  Metrics m;
  std::vector<std::size_t> pred_labels, true_labels;
  for (const auto& r : detail::read_table(seg / "index.tsv", kSegmentHeader, kSegmentColumns)) {
    const auto& id = r[0];
    if (!truth.count(id)) throw FormatError("eval: slide " + id + " has no ground truth");
    const auto gt = png::read_mask(truth[id]);
    SlideMetrics s{id, pipeline::dice(png::read_mask(seg / (id + ".mask.png")), gt),
                   std::numeric_limits<double>::quiet_NaN(), detail::number<std::size_t>(r[1], seg / "index.tsv")};
    if (refined) {
      if (!has_refined.count(id)) throw FormatError("eval: slide " + id + " missing from " + (ref / "index.tsv").string());
      s.dice_post = pipeline::dice(png::read_mask(ref / (id + ".mask.png")), gt);
    }
    const auto table = seg / (id + ".patches.tsv");
    for (const auto& p : detail::read_table(table, kPatchesHeader, kPatchColumns)) {
      const pipeline::Placement at{0, 0, detail::number<std::size_t>(p[0], table), detail::number<std::size_t>(p[1], table)};
      const auto label = pipeline::label_patch(gt, at, detail::number<std::size_t>(p[2], table), cfg.pipeline.label_ratio);
      if (label == pipeline::PatchLabel::Excluded) continue;
      pred_labels.push_back(detail::number<std::size_t>(p[3], table));
      true_labels.push_back(label == pipeline::PatchLabel::Tumour ? 1 : 0);
    }
    m.slides.push_back(s);
  }
  if (m.slides.empty()) throw FormatError("eval: no segmented slides in " + seg.string());
  m.labelled_patches = pred_labels.size();
  if (!pred_labels.empty()) m.patch_accuracy = pipeline::accuracy(pred_labels, true_labels);
  double pre = 0, post = 0;
  for (const auto& s : m.slides) pre += s.dice_pre, post += s.dice_post;
  m.dice_pre = pre / static_cast<double>(m.slides.size());
  if (refined) m.dice_post = post / static_cast<double>(m.slides.size());

  {
    auto os = detail::open_out(out / "metrics.txt");
    os << kMetricsHeader << '\n'
       << "slides = " << m.slides.size() << '\n'
       << "labelled_patches = " << m.labelled_patches << '\n'
       << "patch_accuracy = " << detail::fixed(m.patch_accuracy) << '\n'
       << "dice_pre_crf = " << detail::fixed(m.dice_pre) << '\n'
       << "dice_post_crf = " << detail::fixed(m.dice_post) << '\n';
  }
  std::vector<detail::Row> rows;
  for (const auto& s : m.slides)
    rows.push_back({s.id, detail::fixed(s.dice_pre), detail::fixed(s.dice_post), std::to_string(s.patches)});
  detail::write_table(out / "summary.tsv", kSummaryHeader, {"id", "dice_pre_crf", "dice_post_crf", "n_patches"}, rows);
  log << "eval: accuracy " << detail::fixed(m.patch_accuracy) << " dice " << detail::fixed(m.dice_pre) << " -> "
      << detail::fixed(m.dice_post) << '\n';
  return m;
}

/// Runs gen, pretrain, segment, refine and eval in order.
inline Metrics run_all(const RunConfig& cfg, std::ostream& log) {
  cmd_gen(cfg, log);
  cmd_pretrain(cfg, log);
  cmd_segment(cfg, log);
  cmd_refine(cfg, log);
  return cmd_eval(cfg, log);
}

}  // namespace dclr::app
