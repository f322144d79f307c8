#pragma once

// DU-Net base encoder f, projection head g, and the instance-border weight map.
//
// Inputs in [0,1] are mapped to [-1,1] before the first convolution.
//
// Layout of the encoder (c_l = base_channels * 2^l):
//   level l < depth : [conv3x3 + relu] x2 at c_l, keep as skip, maxpool
//   bottleneck      : [conv3x3 + relu] x2 at c_depth, plus one more when
//                     extra_bottleneck_conv is set (the "deep" variant)
//   level l, upward : upsample2x, concat skip, [conv3x3 + relu] x2 at c_l
//   head            : conv1x1 to embed_dim, global average pool -> h
// Projection: z = W2 relu(W1 h), no biases.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dclr/log.hpp"
#include "dclr/numerics/autograd.hpp"
#include "dclr/numerics/dten.hpp"
#include "dclr/random.hpp"

namespace dclr::encoder {

struct DUNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  std::size_t input_side = 64;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t proj_dim = 16;
  bool extra_bottleneck_conv = true;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("encoder: depth must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("encoder: base_channels must be >= 1");
    if (input_side == 0 || input_side % (std::size_t{1} << depth) != 0)
      throw std::invalid_argument("encoder: input_side " + std::to_string(input_side) + " must be divisible by 2^" +
                                  std::to_string(depth));
    if (embed_dim < 2) throw std::invalid_argument("encoder: embed_dim must be >= 2");
    if (hidden_dim < 1 || proj_dim < 1) throw std::invalid_argument("encoder: projection dims must be >= 1");
  }

  std::size_t width(std::size_t level) const { return base_channels << level; }
};

/// Named parameter arrays of f and g, in a fixed order.
template <typename T>
struct EncoderModel {
  DUNetConfig config;
  std::vector<std::string> names;
  std::vector<BasicTensor<T>> params;

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw std::out_of_range("encoder: no parameter named " + name);
  }
  BasicTensor<T>& param(const std::string& name) { return params[index(name)]; }
  const BasicTensor<T>& param(const std::string& name) const { return params[index(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }

  template <typename U>
  EncoderModel<U> cast() const {
    EncoderModel<U> m{config, names, {}};
    for (const auto& p : params) m.params.push_back(BasicTensor<U>::cast(p));
    return m;
  }
};

namespace detail {

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;  // 0 for biases
};

inline std::vector<ParamSpec> layout(const DUNetConfig& c) {
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    out.push_back({name + ".w", {cout, cin, k, k}, cin * k * k});
    out.push_back({name + ".b", {cout}, 0});
  };
  std::size_t cin = 3;
  for (std::size_t l = 0; l < c.depth; ++l) {
    conv("down" + std::to_string(l) + ".conv0", cin, c.width(l), 3);
    conv("down" + std::to_string(l) + ".conv1", c.width(l), c.width(l), 3);
    cin = c.width(l);
  }
  const std::size_t cb = c.width(c.depth);
  conv("bottleneck.conv0", cin, cb, 3);
  conv("bottleneck.conv1", cb, cb, 3);
  if (c.extra_bottleneck_conv) conv("bottleneck.extra", cb, cb, 3);
  for (std::size_t l = c.depth; l-- > 0;) {
    conv("up" + std::to_string(l) + ".conv0", c.width(l + 1) + c.width(l), c.width(l), 3);
    conv("up" + std::to_string(l) + ".conv1", c.width(l), c.width(l), 3);
  }
  conv("head", c.width(0), c.embed_dim, 1);
  out.push_back({"proj.w1", {c.hidden_dim, c.embed_dim}, c.embed_dim});
  out.push_back({"proj.w2", {c.proj_dim, c.hidden_dim}, c.hidden_dim});
  return out;
}

}  // namespace detail

/// He-normal weights, zero biases.
template <typename T = float>
EncoderModel<T> init_model(const DUNetConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderModel<T> m{config, {}, {}};
  Rng rng = make_rng(seed, "encoder.init");
  for (const auto& spec : detail::layout(config)) {
    BasicTensor<T> p(spec.shape);
    if (spec.fan_in > 0) {
      const double sd = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
      for (auto& v : p.data()) v = static_cast<T>(normal(rng, 0.0, sd));
    }
    m.names.push_back(spec.name);
    m.params.push_back(std::move(p));
  }
  return m;
}

/// Parameters recorded on a tape, parallel to EncoderModel::params.
template <typename T>
struct BoundModel {
  const DUNetConfig* config = nullptr;
  const std::vector<std::string>* names = nullptr;
  std::vector<Var<T>> vars;

  const Var<T>& operator[](const std::string& name) const {
    for (std::size_t i = 0; i < names->size(); ++i)
      if ((*names)[i] == name) return vars[i];
    throw std::out_of_range("encoder: no parameter named " + name);
  }
};

/// Records the model's parameters on `tape` as trainable leaves.
template <typename T>
BoundModel<T> bind(Tape<T>& tape, const EncoderModel<T>& m, bool trainable = true) {
  BoundModel<T> b{&m.config, &m.names, {}};
  for (const auto& p : m.params) b.vars.push_back(trainable ? tape.parameter(p) : tape.constant(p));
  return b;
}

namespace detail {
template <typename T>
Var<T> conv_relu(const Var<T>& x, const BoundModel<T>& m, const std::string& name) {
  return ag::relu(ag::add_bias(ag::conv2d(x, m[name + ".w"], 1, 1), m[name + ".b"]));
}
}  // namespace detail

/// f: [b,3,s,s] -> h: [b,embed_dim].
template <typename T>
Var<T> encode(const Var<T>& x, const BoundModel<T>& m) {
  const auto& c = *m.config;
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != 3 || xs[2] != c.input_side || xs[3] != c.input_side)
    throw ShapeError("encode: expected input [b,3," + std::to_string(c.input_side) + "," +
                     std::to_string(c.input_side) + "], got " + shape_str(xs));
  std::vector<Var<T>> skips;
  Var<T> y = ag::shift(ag::scale(x, T(2)), T(-1));  // [0,1] -> [-1,1]
  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::string p = "down" + std::to_string(l);
    y = detail::conv_relu(y, m, p + ".conv0");
    y = detail::conv_relu(y, m, p + ".conv1");
    skips.push_back(y);
    y = ag::maxpool2d(y);
  }
  y = detail::conv_relu(y, m, "bottleneck.conv0");
  y = detail::conv_relu(y, m, "bottleneck.conv1");
  if (c.extra_bottleneck_conv) y = detail::conv_relu(y, m, "bottleneck.extra");
  for (std::size_t l = c.depth; l-- > 0;) {
    const std::string p = "up" + std::to_string(l);
    y = ag::concat_channels(ag::upsample2x(y), skips[l]);
    y = detail::conv_relu(y, m, p + ".conv0");
    y = detail::conv_relu(y, m, p + ".conv1");
  }
  y = ag::add_bias(ag::conv2d(y, m["head.w"], 1, 0), m["head.b"]);
  return ag::global_avg_pool(y);
}

/// g: z = W2 relu(W1 h), row-wise.
template <typename T>
Var<T> project(const Var<T>& h, const BoundModel<T>& m) {
  return ag::matmul_nt(ag::relu(ag::matmul_nt(h, m["proj.w1"])), m["proj.w2"]);
}

/// Inference-only h = f(x) for a batch [b,3,s,s].
template <typename T>
BasicTensor<T> encode(const BasicTensor<T>& x, const EncoderModel<T>& model) {
  Tape<T> tape;
  auto bound = bind(tape, model, false);
  return encode(tape.constant(x), bound).value();
}

template <typename T>
BasicTensor<T> project(const BasicTensor<T>& h, const EncoderModel<T>& model) {
  Tape<T> tape;
  auto bound = bind(tape, model, false);
  return project(tape.constant(h), bound).value();
}

// ---------------------------------------------------------------------------
// Checkpoints: a text manifest plus one DTEN blob per parameter.

inline constexpr const char* kCheckpointHeader = "# dclr-checkpoint v1";

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const EncoderModel<T>& m) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw FormatError("checkpoint: cannot write " + (dir / "manifest.txt").string());
  const auto& c = m.config;
  os << kCheckpointHeader << '\n'
     << "encoder.depth = " << c.depth << '\n'
     << "encoder.base_channels = " << c.base_channels << '\n'
     << "encoder.input_side = " << c.input_side << '\n'
     << "encoder.embed_dim = " << c.embed_dim << '\n'
     << "encoder.hidden_dim = " << c.hidden_dim << '\n'
     << "encoder.proj_dim = " << c.proj_dim << '\n'
     << "encoder.extra_bottleneck_conv = " << (c.extra_bottleneck_conv ? "true" : "false") << '\n';
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const std::string file = m.names[i] + ".dten";
    os << "param." << m.names[i] << " = " << file << '\n';
    dten::save(dir / file, m.params[i]);
  }
}

inline EncoderModel<float> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw FormatError("checkpoint: missing " + (dir / "manifest.txt").string());
  std::string line;
  std::getline(is, line);
  if (line != kCheckpointHeader) throw FormatError("checkpoint: bad header in " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint: missing key " + k);
    return it->second;
  };
  DUNetConfig c;
  c.depth = std::stoul(get("encoder.depth"));
  c.base_channels = std::stoul(get("encoder.base_channels"));
  c.input_side = std::stoul(get("encoder.input_side"));
  c.embed_dim = std::stoul(get("encoder.embed_dim"));
  c.hidden_dim = std::stoul(get("encoder.hidden_dim"));
  c.proj_dim = std::stoul(get("encoder.proj_dim"));
  c.extra_bottleneck_conv = get("encoder.extra_bottleneck_conv") == "true";
  auto m = init_model<float>(c, 0);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    Tensor t = dten::load(dir / get("param." + m.names[i]));
    if (t.shape() != m.params[i].shape())
      throw FormatError("checkpoint: parameter " + m.names[i] + " has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(m.params[i].shape()));
    m.params[i] = std::move(t);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Weight map: w(x) = w_c(x) + w0 * exp(-(d1(x) + d2(x))^2 / (2 sigma^2)).

using LabelMap = BasicTensor<std::int32_t>;

/// Border of instance k: pixels outside k that are 4-adjacent to k.
inline std::map<std::int32_t, std::vector<std::pair<int, int>>> instance_borders(const LabelMap& mask) {
  const int H = static_cast<int>(mask.dim(0)), W = static_cast<int>(mask.dim(1));
  std::map<std::int32_t, std::vector<std::pair<int, int>>> borders;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto here = mask.at(y, x);
      std::int32_t seen[4];
      int n = 0;
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
        const auto lab = mask.at(yy, xx);
        if (lab > 0 && lab != here && std::find(seen, seen + n, lab) == seen + n) {
          seen[n++] = lab;
          borders[lab].emplace_back(y, x);
        }
      }
    }
  return borders;
}

/// Per-pixel distances to the nearest and second-nearest instance borders
/// (+inf where fewer instances exist). Returned as [2,h,w] in double.
inline BasicTensor<double> border_distances(const LabelMap& mask) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  BasicTensor<double> d({2, H, W}, std::numeric_limits<double>::infinity());
  for (const auto& [label, pts] : instance_borders(mask)) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (auto [py, px] : pts) {
          const double dy = static_cast<double>(y) - py, dx = static_cast<double>(x) - px;
          best = std::min(best, dy * dy + dx * dx);
        }
        best = std::sqrt(best);
        double& d1 = d.at(0, y, x);
        double& d2 = d.at(1, y, x);
        // strict comparison keeps the lower instance id first on ties
        if (best < d1) {
          d2 = d1;
          d1 = best;
        } else if (best < d2) {
          d2 = best;
        }
      }
  }
  return d;
}

/// Class-balancing term: inverse relative class frequency (background vs
/// instance pixels), normalized to mean 1 over the image, unless explicit
/// {background, foreground} weights are given.
inline BasicTensor<double> class_balance(const LabelMap& mask, std::optional<std::array<double, 2>> class_weights) {
  const std::size_t H = mask.dim(0), W = mask.dim(1), N = H * W;
  std::array<double, 2> w{1.0, 1.0};
  if (class_weights) {
    w = *class_weights;
  } else {
    std::size_t fg = 0;
    for (auto v : mask.data()) fg += v > 0;
    const std::size_t counts[2] = {N - fg, fg};
    const double present = (counts[0] > 0) + (counts[1] > 0);
    for (int c = 0; c < 2; ++c)
      if (counts[c] > 0) w[c] = static_cast<double>(N) / (present * static_cast<double>(counts[c]));
  }
  BasicTensor<double> out({H, W});
  for (std::size_t i = 0; i < N; ++i) out[i] = w[mask[i] > 0 ? 1 : 0];
  return out;
}

inline Tensor weight_map(const LabelMap& mask, double w0, double sigma,
                         std::optional<std::array<double, 2>> class_weights = std::nullopt) {
  if (mask.rank() != 2) throw ShapeError("weight_map: mask must be [h,w], got " + shape_str(mask.shape()));
  if (!(sigma > 0.0)) throw std::invalid_argument("weight_map: sigma must be positive");
  for (auto v : mask.data())
    if (v < 0) throw std::invalid_argument("weight_map: labels must be non-negative");
  const auto wc = class_balance(mask, class_weights);
  Tensor out(mask.shape());
  const bool any_instance = std::any_of(mask.data().begin(), mask.data().end(), [](auto v) { return v > 0; });
  if (!any_instance || w0 == 0.0) {
    if (!any_instance && w0 > 0.0) log::warn("weight_map: mask has no labeled instance; returning class weights only");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(wc[i]);
    return out;
  }
  const auto d = border_distances(mask);
  const std::size_t N = out.numel();
  for (std::size_t i = 0; i < N; ++i) {
    const double s = d[i] + d[N + i];
    const double boundary = std::isfinite(s) ? w0 * std::exp(-(s * s) / (2.0 * sigma * sigma)) : 0.0;
    out[i] = static_cast<float>(wc[i] + boundary);
  }
  return out;
}

}  // namespace dclr::encoder
