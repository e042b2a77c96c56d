#pragma once

// Verification suites: oracle equivalence against compositionally assembled
// forwards, generated-channel decomposition, hyperparameter freeze, gradient
// checks and trainable-count reconciliation. The oracle assemblies here use
// only tensor-core primitives and nlf_apply, independent of the layer
// implementations they check.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "cost_model.hpp"
#include "layers.hpp"

namespace groupnl {

enum class ConvRoute { Direct, Fast };

namespace oracle {

template <typename T>
TensorT<T> run_conv(ConvRoute route, const TensorT<T>& x, const TensorT<T>& w,
                    const std::vector<T>* b, const ConvGeometry& g) {
  return route == ConvRoute::Direct ? conv2d_direct(x, w, b, g) : conv2d(x, w, b, g);
}

inline Tensor seed_output(const Layer& layer, const Tensor& x, ConvRoute route) {
  ConvGeometry sg = layer.spec.seed_geom();
  if (layer.spec.kind == LayerKind::Mono && layer.seed_b) {
    std::vector<float> b(layer.seed_b->begin(), layer.seed_b->begin() + sg.c_out);
    return run_conv(route, x, layer.seed_w, &b, sg);
  }
  return run_conv(route, x, layer.seed_w, layer.seed_b ? &*layer.seed_b : nullptr, sg);
}

// Assembled strictly from channel_split / channel_repeat / channel_concat /
// channel_slice and per-slot nlf_apply.
inline Tensor groupnl(const Layer& layer, const Tensor& x, ConvRoute route) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_output(layer, x, route);
  if (s.c_gen() == 0) return y_seed;
  std::uint32_t gamma = s.gamma();
  auto groups = channel_split(y_seed, s.g);
  std::vector<Tensor> pieces{y_seed};
  for (std::uint32_t i = 0; i < s.g; ++i) {
    Tensor rep = channel_repeat(groups[i], gamma);
    auto copies = channel_split(rep, gamma);
    for (std::uint32_t j = 0; j < gamma; ++j)
      pieces.push_back(nlf_apply(layer.hypers.kind(),
                                 layer.hypers.slot_params(i * gamma + j), copies[j],
                                 layer.hypers.laplace_abs()));
  }
  Tensor full = channel_concat(pieces);
  return full.c > s.geom.c_out ? channel_slice(full, 0, s.geom.c_out) : full;
}

inline Tensor ghost(const Layer& layer, const Tensor& x, ConvRoute route) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_output(layer, x, route);
  if (s.c_gen() == 0) return y_seed;
  ConvGeometry cheap{s.c_seed(), s.c_gen(), s.d, 1, s.d / 2, s.c_seed(), s.geom.bias};
  Tensor y_gen = run_conv(route, y_seed, layer.cheap_w,
                          layer.cheap_b ? &*layer.cheap_b : nullptr, cheap);
  return channel_concat<float>({y_seed, y_gen});
}

inline Tensor sinefm(const Layer& layer, const Tensor& x, ConvRoute route) {
  const LayerSpec& s = layer.spec;
  Tensor y_seed = seed_output(layer, x, route);
  if (s.c_gen() == 0) return y_seed;
  std::uint32_t cs = s.c_seed();

  std::vector<Tensor> branches;
  for (std::uint32_t i = 0; i < s.t; ++i) {
    Tensor b = nlf_apply(layer.hypers.kind(), layer.hypers.slot_params(i), y_seed,
                         layer.hypers.laplace_abs());
    const BatchNormParams& bn = layer.bns[i];
    std::size_t plane = std::size_t(b.h) * b.w;
    for (std::uint32_t in = 0; in < b.n; ++in)
      for (std::uint32_t c = 0; c < b.c; ++c) {
        float scale = bn.gamma[c] / std::sqrt(bn.run_var[c] + bn.eps);
        float shift = bn.beta[c] - bn.run_mean[c] * scale;
        float* p = b.data.data() + (std::size_t(in) * b.c + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) p[k] = p[k] * scale + shift;
      }
    branches.push_back(std::move(b));
  }
  // seed-channel-major interleave via single-channel slices
  std::vector<Tensor> interleaved;
  interleaved.reserve(std::size_t(cs) * s.t);
  for (std::uint32_t q = 0; q < cs; ++q)
    for (std::uint32_t i = 0; i < s.t; ++i)
      interleaved.push_back(channel_slice(branches[i], q, q + 1));
  Tensor y_exp = channel_concat(interleaved);

  ConvGeometry pt{cs * s.t, s.c_gen(), 1, 1, 0, cs, s.geom.bias};
  Tensor y_gen = run_conv(route, y_exp, layer.point_w,
                          layer.point_b ? &*layer.point_b : nullptr, pt);
  return channel_concat<float>({y_seed, y_gen});
}

inline Tensor mono_weights(const Layer& layer) {
  const LayerSpec& s = layer.spec;
  std::uint32_t cs = s.c_seed();
  std::size_t filt = std::size_t(s.geom.c_in) * s.geom.k * s.geom.k;
  std::vector<Tensor> banks;
  Tensor seed = layer.seed_w;
  banks.push_back(seed);
  for (std::uint32_t j = 0; j < s.gamma(); ++j) {
    Tensor bank(cs, s.geom.c_in, s.geom.k, s.geom.k);
    auto params = layer.hypers.slot_params(j);
    for (std::size_t i = 0; i < bank.data.size(); ++i) {
      (void)filt;
      bank.data[i] = detail::nlf_eval(layer.hypers.kind(), layer.hypers.laplace_abs(),
                                      float(params[0]), 0.f, seed.data[i]);
    }
    banks.push_back(std::move(bank));
  }
  // concatenate along the filter axis
  std::uint32_t total = cs * (1 + s.gamma());
  Tensor w(total, s.geom.c_in, s.geom.k, s.geom.k);
  std::size_t off = 0;
  for (const auto& b : banks) {
    std::memcpy(w.data.data() + off, b.data.data(), b.numel() * sizeof(float));
    off += b.numel();
  }
  if (total == s.geom.c_out) return w;
  Tensor cut(s.geom.c_out, s.geom.c_in, s.geom.k, s.geom.k);
  std::memcpy(cut.data.data(), w.data.data(), cut.numel() * sizeof(float));
  return cut;
}

inline Tensor mono(const Layer& layer, const Tensor& x, ConvRoute route) {
  Tensor w = mono_weights(layer);
  ConvGeometry full = layer.spec.geom;
  full.groups = 1;
  return run_conv(route, x, w, layer.seed_b ? &*layer.seed_b : nullptr, full);
}

inline Tensor layer(const Layer& l, const Tensor& x, ConvRoute route) {
  switch (l.spec.kind) {
    case LayerKind::Vanilla:
    case LayerKind::Depthwise: {
      ConvGeometry sg = l.spec.seed_geom();
      return run_conv(route, x, l.seed_w, l.seed_b ? &*l.seed_b : nullptr, sg);
    }
    case LayerKind::Mono: return mono(l, x, route);
    case LayerKind::Ghost: return ghost(l, x, route);
    case LayerKind::SineFM: return sinefm(l, x, route);
    case LayerKind::GroupNLStd:
    case LayerKind::GroupNLSparse: return groupnl(l, x, route);
  }
  throw InvalidSpec("oracle: unknown layer kind");
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Randomized legal specs for a given kind (small: c_in, c_out <= 32, k <= 5).

inline LayerSpec random_small_spec(LayerKind kind, std::mt19937_64& rng,
                                   NlfKind nlf = NlfKind::Sinusoidal) {
  auto ri = [&](std::uint32_t lo, std::uint32_t hi) {
    return lo + std::uint32_t(rng() % (hi - lo + 1));
  };
  LayerSpec s;
  s.kind = kind;
  s.nlf = NlfSpec::of(kind == LayerKind::Mono ? NlfKind::Monomial : nlf);
  s.seed = rng();
  std::uint32_t k = std::array<std::uint32_t, 3>{1, 3, 5}[rng() % 3];
  std::uint32_t stride = ri(1, 2);
  std::uint32_t pad = rng() % 2 ? k / 2 : 0;
  bool bias = rng() % 2;

  std::uint32_t c_in = ri(1, 32), c_out = ri(1, 32);
  switch (kind) {
    case LayerKind::Vanilla: {
      std::uint32_t g = std::gcd(c_in, c_out);
      std::uint32_t groups = 1;
      for (std::uint32_t cand : {2u, 4u})
        if (g % cand == 0 && rng() % 2) groups = cand;
      s.geom = ConvGeometry{c_in, c_out, k, stride, pad, groups, bias};
      break;
    }
    case LayerKind::Depthwise: {
      c_in = ri(1, 16);
      std::uint32_t mult = ri(1, 2);
      s.geom = ConvGeometry{c_in, c_in * mult, k, stride, pad, 1, bias};
      break;
    }
    case LayerKind::Mono: {
      s.geom = ConvGeometry{ri(1, 8), ri(1, 32), k, stride, pad, 1, bias};
      s.r = ri(1, 4);
      break;
    }
    case LayerKind::Ghost:
    case LayerKind::SineFM: {
      std::uint32_t cs = ri(1, 10);
      std::uint32_t mult = ri(1, 3);
      s.geom = ConvGeometry{ri(1, 8), cs * mult, k, stride, pad, 1, bias};
      s.r = mult;
      s.t = ri(1, 5);
      s.d = std::array<std::uint32_t, 2>{3, 5}[rng() % 2];
      break;
    }
    case LayerKind::GroupNLStd:
    case LayerKind::GroupNLSparse: {
      s.r = ri(1, 4);
      std::uint32_t c_outg = ri(1, 32);
      s.geom = ConvGeometry{ri(1, 16), c_outg, k, stride, pad, 1, bias};
      std::uint32_t cs = s.c_seed();
      std::vector<std::uint32_t> divs;
      for (std::uint32_t gg = 1; gg <= std::min(cs, 8u); ++gg)
        if (cs % gg == 0) divs.push_back(gg);
      s.g = divs[rng() % divs.size()];
      break;
    }
  }
  s.validate();
  return s;
}

inline Tensor random_small_input(const LayerSpec& s, std::mt19937_64& rng) {
  std::uint32_t lo = s.geom.pad > 0 ? s.geom.k - 2 * s.geom.pad : s.geom.k;
  lo = std::max(lo, 1u);
  std::uint32_t h = lo + std::uint32_t(rng() % (13 - std::min(lo, 12u)));
  std::uint32_t w = lo + std::uint32_t(rng() % (13 - std::min(lo, 12u)));
  std::uint32_t n = 1 + std::uint32_t(rng() % 2);
  return Tensor::uniform(n, s.geom.c_in, h, w, rng(), -1.f, 1.f);
}

// ---------------------------------------------------------------------------
// Suites

struct SuiteResult {
  std::string name;
  std::uint32_t passed = 0;
  std::uint32_t failed = 0;
  std::string detail;
  bool ok() const { return failed == 0 && passed > 0; }
};

inline const std::vector<LayerKind>& all_layer_kinds() {
  static const std::vector<LayerKind> kinds = {
      LayerKind::Vanilla,   LayerKind::Depthwise,  LayerKind::Mono,         LayerKind::Ghost,
      LayerKind::SineFM,    LayerKind::GroupNLStd, LayerKind::GroupNLSparse};
  return kinds;
}

// Forward equality against the conv2d_direct-composed oracle (<= tol) and
// bitwise equality against the same-conv-route composition.
inline SuiteResult verify_oracle_equivalence(std::uint32_t instances_per_kind,
                                             std::uint64_t seed, double tol = 1e-5) {
  SuiteResult res{"oracle", 0, 0, ""};
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (LayerKind kind : all_layer_kinds()) {
    for (std::uint32_t i = 0; i < instances_per_kind; ++i) {
      LayerSpec spec = random_small_spec(kind, rng);
      Layer layer = build_layer(spec, rng());
      Tensor x = random_small_input(spec, rng);
      Tensor got = layer_forward(layer, x);
      Tensor want = oracle::layer(layer, x, ConvRoute::Direct);
      double diff = max_abs_diff(got, want);
      worst = std::max(worst, diff);
      bool ok = diff <= tol;
      if (ok && spec.generative()) ok = bitwise_equal(got, oracle::layer(layer, x, ConvRoute::Fast));
      ok ? ++res.passed : ++res.failed;
    }
  }
  std::ostringstream os;
  os << "max |diff| vs direct-conv composition = " << worst;
  res.detail = os.str();
  return res;
}

// Every generated channel must equal some slot transform of some seed channel.
inline SuiteResult verify_decomposition(std::uint32_t instances, std::uint64_t seed) {
  SuiteResult res{"decomposition", 0, 0, ""};
  std::mt19937_64 rng(seed);
  for (std::uint32_t i = 0; i < instances; ++i) {
    LayerKind kind = rng() % 2 ? LayerKind::GroupNLStd : LayerKind::GroupNLSparse;
    LayerSpec spec = random_small_spec(kind, rng);
    Layer layer = build_layer(spec, rng());
    Tensor x = random_small_input(spec, rng);
    Tensor y = layer_forward(layer, x);
    Tensor y_seed = seed_conv_forward(layer, x);
    std::uint32_t cs = spec.c_seed();

    bool all_matched = true;
    for (std::uint32_t m = cs; m < spec.geom.c_out; ++m) {
      Tensor chan = channel_slice(y, m, m + 1);
      bool matched = false;
      for (std::uint32_t slot = 0; slot < layer.hypers.slots() && !matched; ++slot)
        for (std::uint32_t src = 0; src < cs && !matched; ++src) {
          Tensor cand = nlf_apply(layer.hypers.kind(), layer.hypers.slot_params(slot),
                                  channel_slice(y_seed, src, src + 1),
                                  layer.hypers.laplace_abs());
          matched = bitwise_equal(chan, cand);
        }
      if (!matched) all_matched = false;
    }
    all_matched ? ++res.passed : ++res.failed;
  }
  return res;
}

// Hyperparameters identical before/after repeated forwards; repeated forwards
// bitwise identical.
inline SuiteResult verify_freeze(std::uint32_t instances, std::uint64_t seed) {
  SuiteResult res{"freeze", 0, 0, ""};
  std::mt19937_64 rng(seed);
  for (std::uint32_t i = 0; i < instances; ++i) {
    LayerKind kind = all_layer_kinds()[rng() % all_layer_kinds().size()];
    LayerSpec spec = random_small_spec(kind, rng);
    Layer layer = build_layer(spec, rng());
    Tensor x = random_small_input(spec, rng);
    auto before = layer.hypers.flat();
    Tensor y1 = layer_forward(layer, x);
    Tensor y2 = layer_forward(layer, x);
    bool ok = bitwise_equal(y1, y2) && layer.hypers.flat() == before;
    ok ? ++res.passed : ++res.failed;
  }
  return res;
}

inline SuiteResult verify_gradcheck(std::uint64_t seed, double eps = 1e-5,
                                    double threshold = 1e-5) {
  SuiteResult res{"gradcheck", 0, 0, ""};
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (LayerKind kind : all_layer_kinds()) {
    LayerSpec spec = random_small_spec(kind, rng);
    // keep the parameter count small
    while (count_trainable(build_layer(spec, 1)) > 800) spec = random_small_spec(kind, rng);
    Layer layer = build_layer(spec, rng());
    Tensor x = random_small_input(spec, rng);
    double err = finite_diff_check(layer, x, eps);
    worst = std::max(worst, err);
    err < threshold ? ++res.passed : ++res.failed;
  }
  std::ostringstream os;
  os << "max rel err = " << worst;
  res.detail = os.str();
  return res;
}

// Analytic parameter count == enumerated trainable scalars, exactly.
inline SuiteResult verify_counts(std::uint32_t instances_per_kind, std::uint64_t seed) {
  SuiteResult res{"counts", 0, 0, ""};
  std::mt19937_64 rng(seed);
  for (LayerKind kind : all_layer_kinds())
    for (std::uint32_t i = 0; i < instances_per_kind; ++i) {
      LayerSpec spec = random_small_spec(kind, rng);
      Layer layer = build_layer(spec, rng());
      CostReport cost = layer_cost(spec, 8, 8);
      bool ok = count_trainable(layer) == cost.params && cost.grads == cost.params;
      // the tape must agree as well
      Tape<float> tape;
      Tensor x = random_small_input(spec, rng);
      int xin = tape.constant(x);
      trace_layer(tape, layer, xin, false);
      ok = ok && tape.trainable_scalar_count() == cost.params;
      ok ? ++res.passed : ++res.failed;
    }
  return res;
}

}  // namespace groupnl
