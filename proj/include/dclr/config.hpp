#pragma once

// Run configuration: typed parameter groups with a flat `section.key = value`
// text form. Every key has a default; unknown keys are an error.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dclr/augment.hpp"
#include "dclr/convcrf.hpp"
#include "dclr/datagen.hpp"
#include "dclr/encoder.hpp"
#include "dclr/pipeline.hpp"

namespace dclr::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AugmentParams {
  double crop_p = 1.0, crop_scale_min = 0.2, crop_scale_max = 1.0;
  double flip_p = 0.5;
  double jitter_p = 0.8, jitter_strength = 1.0;
  double drop_p = 0.2;
  double blur_p = 0.5, blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  double cutout_p = 0.5, cutout_fraction = 0.25;
  double sobel_p = 0.0;

  augment::Policy policy(std::size_t side) const {
    using augment::Kind;
    augment::Policy p;
    p.out_h = p.out_w = side;
    auto add = [&](Kind k, double prob) -> augment::TransformSpec& {
      augment::TransformSpec t;
      t.kind = k;
      t.probability = prob;
      p.transforms.push_back(t);
      return p.transforms.back();
    };
    auto& crop = add(Kind::ResizedCrop, crop_p);
    crop.scale_min = crop_scale_min;
    crop.scale_max = crop_scale_max;
    add(Kind::HorizontalFlip, flip_p);
    add(Kind::ColourJitter, jitter_p).strength = jitter_strength;
    add(Kind::ColourDrop, drop_p);
    auto& blur = add(Kind::GaussianBlur, blur_p);
    blur.sigma_min = blur_sigma_min;
    blur.sigma_max = blur_sigma_max;
    add(Kind::Cutout, cutout_p).side_fraction = cutout_fraction;
    add(Kind::Sobel, sobel_p);
    for (const auto& t : p.transforms) t.validate();
    return p;
  }
};

struct PipelineParams {
  std::size_t patch_side = 64;
  std::size_t train_stride = 64;
  std::size_t segment_stride = 32;
  double background_threshold = 0.9;
  double min_tissue = 0.25;
  double label_ratio = 0.75;
  std::size_t kmeans_restarts = 10;
  std::string tumour_cluster = "darker";  // darker | 0 | 1
  std::string segment_split = "test";     // test | train | all
  std::string probability = "axis";       // axis | distance
};

struct CrfParams {
  std::size_t filter_size = 7;
  std::size_t iterations = 5;
  double spatial_theta = 3.0, spatial_weight = 0.5;
  double bilateral_theta_xy = 3.0, bilateral_theta_rgb = 0.1, bilateral_weight = 2.0;

  std::vector<convcrf::KernelSpec> kernels() const {
    return {convcrf::KernelSpec::spatial(spatial_theta, spatial_weight),
            convcrf::KernelSpec::bilateral(bilateral_theta_xy, bilateral_theta_rgb, bilateral_weight)};
  }
  convcrf::CrfOptions options() const { return {filter_size, iterations}; }
};

/// Stage directories; empty means `<out>/<stage>`.
struct IoParams {
  std::string data, model, segment, refine, eval;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0 = machine parallelism
  std::string out = "run";
  std::size_t slides = 20;
  double split = 0.8;
  datagen::SynthParams synth;
  AugmentParams augment;
  encoder::DUNetConfig encoder{3, 8, 32, 32, 32, 16, true};
  double temperature = 0.5;
  std::size_t batch = 64;
  double lr = 0.001, momentum = 0.0;
  std::size_t patience = 20, max_epochs = 15;
  double val_fraction = 0.1;
  PipelineParams pipeline;
  CrfParams crf;
  IoParams io;

  std::filesystem::path dir(const std::string& stage) const {
    const std::string* p = stage == "data"      ? &io.data
                           : stage == "model"   ? &io.model
                           : stage == "segment" ? &io.segment
                           : stage == "refine"  ? &io.refine
                                                : &io.eval;
    return p->empty() ? std::filesystem::path(out) / stage : std::filesystem::path(*p);
  }

  pipeline::PretrainConfig pretrain() const {
    pipeline::PretrainConfig c;
    c.encoder = encoder;
    c.policy = augment.policy(encoder.input_side);
    c.temperature = temperature;
    c.lr = lr;
    c.momentum = momentum;
    c.batch = batch;
    c.patience = patience;
    c.max_epochs = max_epochs;
    c.val_fraction = val_fraction;
    c.seed = derive_seed(seed, "pretrain");
    return c;
  }
};

namespace detail {

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
}

template <typename T>
T parse_value(const std::string& key, const std::string& s) {
  if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config: " + key + ": expected true/false, got '" + s + "'");
  } else {
    T v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw ConfigError("config: " + key + ": cannot parse '" + s + "'");
    return v;
  }
}

struct Entry {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace detail

/// Key table over a config instance, in output order.
inline std::vector<detail::Entry> entries(RunConfig& c) {
  std::vector<detail::Entry> e;
  auto bind = [&](const std::string& key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    auto* f = &field;
    e.push_back({key, [f, key](const std::string& s) { *f = detail::parse_value<T>(key, s); },
                 [f] { return detail::format_value(*f); }});
  };
  bind("run.seed", c.seed);
  bind("run.threads", c.threads);
  bind("run.out", c.out);
  bind("datagen.slides", c.slides);
  bind("datagen.split", c.split);
  bind("datagen.side", c.synth.side);
  bind("datagen.blobs", c.synth.n_blobs);
  bind("datagen.delta", c.synth.delta);
  bind("datagen.noise", c.synth.noise);
  bind("datagen.margin", c.synth.margin);
  bind("datagen.radius_min", c.synth.radius_min);
  bind("datagen.radius_max", c.synth.radius_max);
  bind("datagen.lobes", c.synth.lobes);
  bind("datagen.wobble", c.synth.wobble);
  bind("augment.crop_p", c.augment.crop_p);
  bind("augment.crop_scale_min", c.augment.crop_scale_min);
  bind("augment.crop_scale_max", c.augment.crop_scale_max);
  bind("augment.flip_p", c.augment.flip_p);
  bind("augment.jitter_p", c.augment.jitter_p);
  bind("augment.jitter_strength", c.augment.jitter_strength);
  bind("augment.drop_p", c.augment.drop_p);
  bind("augment.blur_p", c.augment.blur_p);
  bind("augment.blur_sigma_min", c.augment.blur_sigma_min);
  bind("augment.blur_sigma_max", c.augment.blur_sigma_max);
  bind("augment.cutout_p", c.augment.cutout_p);
  bind("augment.cutout_fraction", c.augment.cutout_fraction);
  bind("augment.sobel_p", c.augment.sobel_p);
  bind("encoder.depth", c.encoder.depth);
  bind("encoder.base_channels", c.encoder.base_channels);
  bind("encoder.input_side", c.encoder.input_side);
  bind("encoder.embed_dim", c.encoder.embed_dim);
  bind("encoder.hidden_dim", c.encoder.hidden_dim);
  bind("encoder.proj_dim", c.encoder.proj_dim);
  bind("encoder.extra_bottleneck_conv", c.encoder.extra_bottleneck_conv);
  bind("contrastive.temperature", c.temperature);
  bind("contrastive.batch", c.batch);
  bind("pretrain.lr", c.lr);
  bind("pretrain.momentum", c.momentum);
  bind("pretrain.patience", c.patience);
  bind("pretrain.max_epochs", c.max_epochs);
  bind("pretrain.val_fraction", c.val_fraction);
  bind("pipeline.patch_side", c.pipeline.patch_side);
  bind("pipeline.train_stride", c.pipeline.train_stride);
  bind("pipeline.segment_stride", c.pipeline.segment_stride);
  bind("pipeline.background_threshold", c.pipeline.background_threshold);
  bind("pipeline.min_tissue", c.pipeline.min_tissue);
  bind("pipeline.label_ratio", c.pipeline.label_ratio);
  bind("pipeline.kmeans_restarts", c.pipeline.kmeans_restarts);
  bind("pipeline.tumour_cluster", c.pipeline.tumour_cluster);
  bind("pipeline.segment_split", c.pipeline.segment_split);
  bind("pipeline.probability", c.pipeline.probability);
  bind("crf.filter_size", c.crf.filter_size);
  bind("crf.iterations", c.crf.iterations);
  bind("crf.spatial_theta", c.crf.spatial_theta);
  bind("crf.spatial_weight", c.crf.spatial_weight);
  bind("crf.bilateral_theta_xy", c.crf.bilateral_theta_xy);
  bind("crf.bilateral_theta_rgb", c.crf.bilateral_theta_rgb);
  bind("crf.bilateral_weight", c.crf.bilateral_weight);
  bind("io.data", c.io.data);
  bind("io.model", c.io.model);
  bind("io.segment", c.io.segment);
  bind("io.refine", c.io.refine);
  bind("io.eval", c.io.eval);
  return e;
}

/// Sets one key; throws ConfigError for unknown keys or unparsable values.
inline void set(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& e : entries(c))
    if (e.key == key) return e.set(value);
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Applies `key = value` lines; '#' starts a comment.
inline void apply_text(RunConfig& c, std::istream& in, const std::string& origin = "<config>") {
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + origin + ":" + std::to_string(n) + ": expected 'key = value'");
    set(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void apply_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  apply_text(c, in, path.string());
}

/// "key=value" override, as given on the command line.
inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("config: override '" + kv + "' is not key=value");
  set(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

/// Cross-field checks, run before any stage starts.
inline void validate(const RunConfig& c) {
  c.synth.validate();
  c.encoder.validate();
  c.augment.policy(c.encoder.input_side);
  if (c.slides < 2) throw ConfigError("config: datagen.slides must be >= 2");
  if (!(c.split > 0 && c.split < 1)) throw ConfigError("config: datagen.split must lie in (0,1)");
  if (!(c.temperature > 0)) throw ConfigError("config: contrastive.temperature must be > 0");
  if (c.batch < 2) throw ConfigError("config: contrastive.batch must be >= 2");
  if (!(c.lr > 0)) throw ConfigError("config: pretrain.lr must be > 0");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ConfigError("config: pretrain.momentum must lie in [0,1)");
  if (c.max_epochs < 1) throw ConfigError("config: pretrain.max_epochs must be >= 1");
  if (!(c.val_fraction >= 0 && c.val_fraction < 1)) throw ConfigError("config: pretrain.val_fraction must lie in [0,1)");
  const auto& p = c.pipeline;
  if (p.patch_side < 1 || p.patch_side > c.synth.side) throw ConfigError("config: pipeline.patch_side out of range");
  if (p.train_stride < 1 || p.segment_stride < 1) throw ConfigError("config: pipeline strides must be >= 1");
  if (!(p.background_threshold > 0 && p.background_threshold < 1))
    throw ConfigError("config: pipeline.background_threshold must lie in (0,1)");
  if (!(p.label_ratio > 0.5 && p.label_ratio <= 1)) throw ConfigError("config: pipeline.label_ratio must lie in (0.5,1]");
  if (p.tumour_cluster != "darker" && p.tumour_cluster != "0" && p.tumour_cluster != "1")
    throw ConfigError("config: pipeline.tumour_cluster must be darker, 0 or 1");
  if (p.segment_split != "test" && p.segment_split != "train" && p.segment_split != "all")
    throw ConfigError("config: pipeline.segment_split must be test, train or all");
  if (p.probability != "axis" && p.probability != "distance")
    throw ConfigError("config: pipeline.probability must be axis or distance");
  convcrf::require_odd_filter(c.crf.filter_size);
  if (c.crf.iterations < 1) throw ConfigError("config: crf.iterations must be >= 1");
  for (const auto& k : c.crf.kernels()) k.validate();
}

inline std::string to_text(const RunConfig& c) {
  RunConfig copy = c;
  std::ostringstream os;
  os << "# dclr-config v1\n";
  for (const auto& e : entries(copy)) os << e.key << " = " << e.get() << "\n";
  return os.str();
}

inline void write(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path.string());
  out << to_text(c);
}

}  // namespace dclr::config
