#pragma once

// The six convolution layer families: vanilla, depthwise, mono (generated
// filters), ghost (cheap conv), sinefm (NLF branches + BN + 1x1 aligner) and
// grouped-nonlinear generation in standard and sparse form.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "conv_kernels.hpp"
#include "nlf.hpp"
#include "tensor.hpp"

namespace groupnl {

enum class LayerKind { Vanilla, Depthwise, Mono, Ghost, SineFM, GroupNLStd, GroupNLSparse };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Vanilla: return "vanilla";
    case LayerKind::Depthwise: return "depthwise";
    case LayerKind::Mono: return "mono";
    case LayerKind::Ghost: return "ghost";
    case LayerKind::SineFM: return "sinefm";
    case LayerKind::GroupNLStd: return "groupnl_std";
    case LayerKind::GroupNLSparse: return "groupnl_sparse";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::Vanilla;
  ConvGeometry geom;
  std::uint32_t r = 2;  // reduction ratio c_out / c_seed
  std::uint32_t g = 4;  // split groups
  std::uint32_t t = 5;  // sinefm expansion count
  std::uint32_t d = 3;  // ghost cheap-kernel size
  NlfSpec nlf;
  std::uint64_t seed = 0;  // hyperparameter sampling seed

  bool generative() const {
    return kind == LayerKind::Mono || kind == LayerKind::Ghost || kind == LayerKind::SineFM ||
           kind == LayerKind::GroupNLStd || kind == LayerKind::GroupNLSparse;
  }
  std::uint32_t c_seed() const {
    return generative() ? (geom.c_out + r - 1) / r : geom.c_out;
  }
  std::uint32_t c_gen() const { return geom.c_out - c_seed(); }
  // Copies per group needed to fill the generated channels.
  std::uint32_t gamma() const {
    std::uint32_t cs = c_seed();
    return (geom.c_out + cs - 1) / cs - 1;
  }
  std::uint32_t xi() const { return std::gcd(geom.c_in, c_seed()); }
  std::uint32_t nlf_slots() const {
    switch (kind) {
      case LayerKind::GroupNLStd:
      case LayerKind::GroupNLSparse: return gamma() * g;
      case LayerKind::Mono: return gamma();
      case LayerKind::SineFM: return c_gen() > 0 ? t : 0;
      default: return 0;
    }
  }

  // Geometry of the trainable seed convolution (the whole conv for
  // vanilla/depthwise).
  ConvGeometry seed_geom() const {
    ConvGeometry s = geom;
    switch (kind) {
      case LayerKind::Vanilla: break;
      case LayerKind::Depthwise: s.groups = geom.c_in; break;
      case LayerKind::Mono:
      case LayerKind::Ghost:
      case LayerKind::SineFM:
      case LayerKind::GroupNLStd:
        s.groups = 1;
        s.c_out = c_seed();
        break;
      case LayerKind::GroupNLSparse:
        s.groups = xi();
        s.c_out = c_seed();
        break;
    }
    if (kind == LayerKind::Mono) s.c_out = c_seed();
    return s;
  }

  void validate() const {
    geom.validate();
    if (r == 0) throw InvalidSpec("r must be >= 1");
    if (kind == LayerKind::Depthwise && geom.c_out % geom.c_in != 0)
      throw InvalidSpec("depthwise: c_out must be a multiple of c_in");
    if (generative() && geom.groups != 1)
      throw InvalidSpec("generative layer kinds derive their own conv groups; geom.groups must be 1");
    if (kind == LayerKind::GroupNLStd || kind == LayerKind::GroupNLSparse) {
      if (g == 0) throw InvalidSpec("g must be >= 1");
      if (c_seed() % g != 0)
        throw InvalidSpec("c_seed (" + std::to_string(c_seed()) +
                          ") not divisible by g (" + std::to_string(g) + ")");
    }
    if (kind == LayerKind::Ghost || kind == LayerKind::SineFM) {
      if (c_gen() > 0 && c_gen() % c_seed() != 0)
        throw InvalidSpec("c_gen (" + std::to_string(c_gen()) +
                          ") must be a multiple of c_seed (" + std::to_string(c_seed()) + ")");
      if (kind == LayerKind::Ghost && d == 0) throw InvalidSpec("d must be >= 1");
      if (kind == LayerKind::SineFM && t == 0) throw InvalidSpec("t must be >= 1");
    }
  }
};

struct BatchNormParams {
  std::vector<float> gamma, beta, run_mean, run_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  explicit BatchNormParams(std::uint32_t c = 0)
      : gamma(c, 1.0f), beta(c, 0.0f), run_mean(c, 0.0f), run_var(c, 1.0f) {}
  std::uint32_t channels() const { return std::uint32_t(gamma.size()); }
};

struct Layer {
  LayerSpec spec;
  Tensor seed_w;
  std::optional<std::vector<float>> seed_b;
  HyperSet hypers;  // empty when nlf_slots() == 0

  // ghost
  Tensor cheap_w;
  std::optional<std::vector<float>> cheap_b;
  // sinefm
  Tensor point_w;
  std::optional<std::vector<float>> point_b;
  std::vector<BatchNormParams> bns;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t s, std::uint64_t tag) {
  std::uint64_t z = s + 0x9e3779b97f4a7c15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline Tensor kaiming_uniform(std::uint32_t c_out, std::uint32_t c_in_per_group,
                              std::uint32_t k, std::uint64_t seed) {
  Tensor w(c_out, c_in_per_group, k, k);
  double fan_in = double(c_in_per_group) * k * k;
  double bound = std::sqrt(6.0 / fan_in);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w.data) v = float(dist(rng));
  return w;
}

inline std::vector<float> bias_uniform(std::uint32_t c_out, std::uint32_t c_in_per_group,
                                       std::uint32_t k, std::uint64_t seed) {
  std::vector<float> b(c_out);
  double fan_in = double(c_in_per_group) * k * k;
  double bound = 1.0 / std::sqrt(fan_in);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : b) v = float(dist(rng));
  return b;
}

}  // namespace detail

inline Layer build_layer(const LayerSpec& spec, std::uint64_t init_seed) {
  spec.validate();
  Layer layer;
  layer.spec = spec;

  ConvGeometry sg = spec.seed_geom();
  std::uint32_t cg_in = sg.c_in / sg.groups;
  layer.seed_w = detail::kaiming_uniform(sg.c_out, cg_in, sg.k, detail::mix_seed(init_seed, 0));
  if (spec.geom.bias) {
    // Mono's conv spans all c_out channels, so its bias does too.
    std::uint32_t nb = spec.kind == LayerKind::Mono ? spec.geom.c_out : sg.c_out;
    layer.seed_b = detail::bias_uniform(nb, cg_in, sg.k, detail::mix_seed(init_seed, 1));
  }

  if (spec.nlf_slots() > 0)
    layer.hypers = sample_hyperset(spec.nlf, spec.nlf_slots(), spec.seed);

  if (spec.kind == LayerKind::Ghost && spec.c_gen() > 0) {
    layer.cheap_w = detail::kaiming_uniform(spec.c_gen(), 1, spec.d,
                                            detail::mix_seed(init_seed, 2));
    if (spec.geom.bias)
      layer.cheap_b = detail::bias_uniform(spec.c_gen(), 1, spec.d,
                                           detail::mix_seed(init_seed, 3));
  }
  if (spec.kind == LayerKind::SineFM && spec.c_gen() > 0) {
    layer.point_w = detail::kaiming_uniform(spec.c_gen(), spec.t, 1,
                                            detail::mix_seed(init_seed, 4));
    if (spec.geom.bias)
      layer.point_b = detail::bias_uniform(spec.c_gen(), spec.t, 1,
                                           detail::mix_seed(init_seed, 5));
    layer.bns.assign(spec.t, BatchNormParams(spec.c_seed()));
  }
  return layer;
}

// Just the seed convolution (the trainable conv of the layer).
template <typename T>
TensorT<T> seed_conv_forward(const Layer& layer, const TensorT<T>& x) {
  ConvGeometry sg = layer.spec.seed_geom();
  TensorT<T> w = layer.seed_w.template cast<T>();
  std::optional<std::vector<T>> b;
  if (layer.seed_b) {
    b.emplace(layer.seed_b->begin(), layer.seed_b->end());
    if (layer.spec.kind == LayerKind::Mono) b->resize(sg.c_out);  // seed slice of the full bias
  }
  return conv2d(x, w, b ? &*b : nullptr, sg);
}

inline Tensor seed_conv_forward(const Layer& layer, const Tensor& x) {
  ConvGeometry sg = layer.spec.seed_geom();
  if (layer.spec.kind == LayerKind::Mono && layer.seed_b) {
    std::vector<float> b(layer.seed_b->begin(), layer.seed_b->begin() + sg.c_out);
    return conv2d(x, layer.seed_w, &b, sg);
  }
  return conv2d(x, layer.seed_w, layer.seed_b ? &*layer.seed_b : nullptr, sg);
}

namespace detail {

inline void bn_eval_inplace(const BatchNormParams& bn, Tensor& x) {
  std::size_t plane = std::size_t(x.h) * x.w;
  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t c = 0; c < x.c; ++c) {
      float scale = bn.gamma[c] / std::sqrt(bn.run_var[c] + bn.eps);
      float shift = bn.beta[c] - bn.run_mean[c] * scale;
      float* p = x.data.data() + (std::size_t(in) * x.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * scale + shift;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward passes. All are pure (eval-mode) functions of the layer and input.

inline Tensor groupnl_forward(const Layer& layer, const Tensor& x) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_conv_forward(layer, x);
  std::uint32_t cs = s.c_seed();
  if (s.c_gen() == 0) return y_seed;

  Tensor out(x.n, s.geom.c_out, y_seed.h, y_seed.w);
  std::size_t plane = std::size_t(y_seed.h) * y_seed.w;
  std::uint32_t width = cs / s.g;          // channels per slot
  std::uint32_t gamma = s.gamma();
  std::uint32_t slots = s.nlf_slots();

  for (std::uint32_t in = 0; in < x.n; ++in) {
    // seed channels pass through untouched
    std::memcpy(out.data.data() + std::size_t(in) * s.geom.c_out * plane,
                y_seed.data.data() + std::size_t(in) * cs * plane,
                std::size_t(cs) * plane * sizeof(float));
    for (std::uint32_t slot = 0; slot < slots; ++slot) {
      std::uint32_t grp = slot / gamma;
      float p0 = float(layer.hypers.param(0, slot));
      float p1 = nlf_arity(layer.hypers.kind()) > 1 ? float(layer.hypers.param(1, slot)) : 0.0f;
      for (std::uint32_t cc = 0; cc < width; ++cc) {
        std::uint32_t dst_c = cs + slot * width + cc;
        if (dst_c >= s.geom.c_out) break;  // ceil overshoot: truncate trailing channels
        std::uint32_t src_c = grp * width + cc;
        const float* src = y_seed.data.data() + (std::size_t(in) * cs + src_c) * plane;
        float* dst = out.data.data() + (std::size_t(in) * s.geom.c_out + dst_c) * plane;
        detail::nlf_eval_span(layer.hypers.kind(), layer.hypers.laplace_abs(), p0, p1, src,
                              dst, plane);
      }
    }
  }
  return out;
}

inline Tensor ghost_forward(const Layer& layer, const Tensor& x) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_conv_forward(layer, x);
  if (s.c_gen() == 0) return y_seed;
  ConvGeometry cheap{s.c_seed(), s.c_gen(), s.d, 1, s.d / 2, s.c_seed(), s.geom.bias};
  Tensor y_gen = conv2d(y_seed, layer.cheap_w,
                        layer.cheap_b ? &*layer.cheap_b : nullptr, cheap);
  return channel_concat<float>({y_seed, y_gen});
}

// Expanded maps are laid out seed-channel-major: channel q*t + i holds branch
// i of seed channel q, so each group of the 1x1 aligner combines the t
// transformed versions of one seed channel.
inline Tensor sinefm_expand(const Layer& layer, const Tensor& y_seed) {
  const LayerSpec& s = layer.spec;
  std::uint32_t cs = s.c_seed();
  Tensor y_exp(y_seed.n, cs * s.t, y_seed.h, y_seed.w);
  std::size_t plane = std::size_t(y_seed.h) * y_seed.w;
  for (std::uint32_t i = 0; i < s.t; ++i) {
    Tensor branch = nlf_apply(layer.hypers.kind(), layer.hypers.slot_params(i), y_seed,
                              layer.hypers.laplace_abs());
    detail::bn_eval_inplace(layer.bns[i], branch);
    for (std::uint32_t in = 0; in < y_seed.n; ++in)
      for (std::uint32_t q = 0; q < cs; ++q)
        std::memcpy(y_exp.data.data() +
                        (std::size_t(in) * y_exp.c + std::size_t(q) * s.t + i) * plane,
                    branch.data.data() + (std::size_t(in) * cs + q) * plane,
                    plane * sizeof(float));
  }
  return y_exp;
}

inline Tensor sinefm_forward(const Layer& layer, const Tensor& x) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_conv_forward(layer, x);
  if (s.c_gen() == 0) return y_seed;
  Tensor y_exp = sinefm_expand(layer, y_seed);
  ConvGeometry pt{s.c_seed() * s.t, s.c_gen(), 1, 1, 0, s.c_seed(), s.geom.bias};
  Tensor y_gen = conv2d(y_exp, layer.point_w,
                        layer.point_b ? &*layer.point_b : nullptr, pt);
  return channel_concat<float>({y_seed, y_gen});
}

// Full filter bank for mono: seed filters followed by gamma transformed
// copies, truncated to c_out.
inline Tensor mono_effective_weights(const Layer& layer) {
  const LayerSpec& s = layer.spec;
  std::uint32_t cs = s.c_seed();
  Tensor w(s.geom.c_out, s.geom.c_in, s.geom.k, s.geom.k);
  std::size_t filt = std::size_t(s.geom.c_in) * s.geom.k * s.geom.k;
  std::memcpy(w.data.data(), layer.seed_w.data.data(), std::size_t(cs) * filt * sizeof(float));
  for (std::uint32_t slot = 0; slot < s.gamma(); ++slot) {
    float p0 = float(layer.hypers.param(0, slot));
    for (std::uint32_t oc = 0; oc < cs; ++oc) {
      std::uint32_t dst = cs + slot * cs + oc;
      if (dst >= s.geom.c_out) break;
      const float* src = layer.seed_w.data.data() + std::size_t(oc) * filt;
      float* out = w.data.data() + std::size_t(dst) * filt;
      detail::nlf_eval_span(layer.hypers.kind(), layer.hypers.laplace_abs(), p0, 0.0f, src,
                            out, filt);
    }
  }
  return w;
}

inline Tensor mono_forward(const Layer& layer, const Tensor& x) {
  Tensor w = mono_effective_weights(layer);
  ConvGeometry full = layer.spec.geom;
  full.groups = 1;
  return conv2d(x, w, layer.seed_b ? &*layer.seed_b : nullptr, full);
}

inline Tensor layer_forward(const Layer& layer, const Tensor& x) {
  switch (layer.spec.kind) {
    case LayerKind::Vanilla:
    case LayerKind::Depthwise:
      return seed_conv_forward(layer, x);
    case LayerKind::Mono: return mono_forward(layer, x);
    case LayerKind::Ghost: return ghost_forward(layer, x);
    case LayerKind::SineFM: return sinefm_forward(layer, x);
    case LayerKind::GroupNLStd:
    case LayerKind::GroupNLSparse:
      return groupnl_forward(layer, x);
  }
  throw InvalidSpec("unknown layer kind");
}

// ---------------------------------------------------------------------------
// Trainable parameter enumeration. Hyperparameters are never listed here.

struct ParamView {
  std::string name;
  float* data = nullptr;
  std::size_t size = 0;
};

inline std::vector<ParamView> trainable_params(Layer& layer) {
  std::vector<ParamView> ps;
  ps.push_back({"seed_w", layer.seed_w.data.data(), layer.seed_w.numel()});
  if (layer.seed_b) ps.push_back({"seed_b", layer.seed_b->data(), layer.seed_b->size()});
  if (layer.spec.kind == LayerKind::Ghost && layer.spec.c_gen() > 0) {
    ps.push_back({"cheap_w", layer.cheap_w.data.data(), layer.cheap_w.numel()});
    if (layer.cheap_b) ps.push_back({"cheap_b", layer.cheap_b->data(), layer.cheap_b->size()});
  }
  if (layer.spec.kind == LayerKind::SineFM && layer.spec.c_gen() > 0) {
    ps.push_back({"point_w", layer.point_w.data.data(), layer.point_w.numel()});
    if (layer.point_b) ps.push_back({"point_b", layer.point_b->data(), layer.point_b->size()});
    for (std::size_t i = 0; i < layer.bns.size(); ++i) {
      ps.push_back({"bn" + std::to_string(i) + "_gamma", layer.bns[i].gamma.data(),
                    layer.bns[i].gamma.size()});
      ps.push_back({"bn" + std::to_string(i) + "_beta", layer.bns[i].beta.data(),
                    layer.bns[i].beta.size()});
    }
  }
  return ps;
}

inline std::size_t count_trainable(const Layer& layer) {
  std::size_t n = layer.seed_w.numel();
  if (layer.seed_b) n += layer.seed_b->size();
  if (layer.spec.kind == LayerKind::Ghost && layer.spec.c_gen() > 0) {
    n += layer.cheap_w.numel();
    if (layer.cheap_b) n += layer.cheap_b->size();
  }
  if (layer.spec.kind == LayerKind::SineFM && layer.spec.c_gen() > 0) {
    n += layer.point_w.numel();
    if (layer.point_b) n += layer.point_b->size();
    for (const auto& bn : layer.bns) n += bn.gamma.size() + bn.beta.size();
  }
  return n;
}

}  // namespace groupnl
