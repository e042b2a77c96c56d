#pragma once

// Data-agnostic nonlinear transformation functions and the seeded sampling of
// their fixed hyperparameters. Hyperparameters are drawn once per layer and
// never trained.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace groupnl {

struct ArityMismatch : std::runtime_error {
  explicit ArityMismatch(const std::string& what) : std::runtime_error(what) {}
};

enum class NlfKind { Sinusoidal, Monomial, Gaussian, Laplace };

inline std::uint32_t nlf_arity(NlfKind k) {
  return k == NlfKind::Sinusoidal ? 2u : 1u;
}

inline const char* nlf_name(NlfKind k) {
  switch (k) {
    case NlfKind::Sinusoidal: return "sinusoidal";
    case NlfKind::Monomial: return "monomial";
    case NlfKind::Gaussian: return "gaussian";
    case NlfKind::Laplace: return "laplace";
  }
  return "?";
}

// Sampling ranges per hyperparameter dimension. Defaults follow the reference
// configuration; the gaussian/laplace epsilon range is a config default and
// can be overridden.
struct NlfSpec {
  NlfKind kind = NlfKind::Sinusoidal;
  std::array<double, 2> range0{1.0, 2.0};  // omega / eta / epsilon
  std::array<double, 2> range1{1.0, 5.0};  // phi (sinusoidal only)
  bool laplace_abs = false;

  static NlfSpec of(NlfKind k) {
    NlfSpec s;
    s.kind = k;
    switch (k) {
      case NlfKind::Sinusoidal: s.range0 = {1.0, 2.0}; s.range1 = {1.0, 5.0}; break;
      case NlfKind::Monomial: s.range0 = {1.0, 7.0}; break;
      case NlfKind::Gaussian: s.range0 = {1.0, 2.0}; break;
      case NlfKind::Laplace: s.range0 = {1.0, 2.0}; break;
    }
    return s;
  }
};

// One hyperparameter vector per dimension, each sampled independently and
// broadcast per slot. Immutable after construction.
class HyperSet {
 public:
  HyperSet() = default;
  HyperSet(NlfKind kind, std::uint32_t slots, std::uint64_t seed,
           std::vector<std::vector<double>> dims, bool laplace_abs)
      : kind_(kind), slots_(slots), seed_(seed), dims_(std::move(dims)),
        laplace_abs_(laplace_abs) {}

  NlfKind kind() const { return kind_; }
  std::uint32_t slots() const { return slots_; }
  std::uint64_t seed() const { return seed_; }
  bool laplace_abs() const { return laplace_abs_; }

  double param(std::uint32_t dim, std::uint32_t slot) const { return dims_[dim][slot]; }

  // Per-slot hyperparameter vector (arity entries).
  std::vector<double> slot_params(std::uint32_t slot) const {
    std::vector<double> p;
    p.reserve(dims_.size());
    for (const auto& d : dims_) p.push_back(d[slot]);
    return p;
  }

  // Flat dimension-major view, length slots * arity.
  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto& d : dims_) out.insert(out.end(), d.begin(), d.end());
    return out;
  }

 private:
  NlfKind kind_ = NlfKind::Sinusoidal;
  std::uint32_t slots_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::vector<double>> dims_;
  bool laplace_abs_ = false;
};

inline HyperSet sample_hyperset(const NlfSpec& spec, std::uint32_t slots, std::uint64_t seed) {
  if (slots == 0) throw InvalidSpec("sample_hyperset: slots must be >= 1");
  std::mt19937_64 rng(seed);
  std::uint32_t arity = nlf_arity(spec.kind);
  std::vector<std::vector<double>> dims(arity);
  for (std::uint32_t d = 0; d < arity; ++d) {
    const auto& r = d == 0 ? spec.range0 : spec.range1;
    std::uniform_real_distribution<double> dist(r[0], r[1]);
    dims[d].resize(slots);
    for (std::uint32_t s = 0; s < slots; ++s) dims[d][s] = dist(rng);
  }
  return HyperSet(spec.kind, slots, seed, std::move(dims), spec.laplace_abs);
}

inline HyperSet sample_hyperset(NlfKind kind, std::uint32_t slots, std::uint64_t seed) {
  return sample_hyperset(NlfSpec::of(kind), slots, seed);
}

namespace detail {

template <typename T>
inline T nlf_eval(NlfKind kind, bool laplace_abs, T p0, T p1, T x) {
  switch (kind) {
    case NlfKind::Sinusoidal:
      return std::sin(p0 * (x + p1));
    case NlfKind::Monomial: {
      if (x == T(0)) return T(0);
      T mag = std::pow(std::abs(x), p0);
      return x < T(0) ? -mag : mag;
    }
    case NlfKind::Gaussian: {
      T e = p0 * x;
      return std::exp(-e * e);
    }
    case NlfKind::Laplace: {
      T arg = laplace_abs ? std::abs(x) : x;
      return (p0 / T(2)) * std::exp(-p0 * arg);
    }
  }
  return T(0);
}

// Same arithmetic as nlf_eval, with the kind dispatch hoisted out of the
// element loop.
template <typename T>
inline void nlf_eval_span(NlfKind kind, bool laplace_abs, T p0, T p1, const T* src, T* dst,
                          std::size_t len) {
  switch (kind) {
    case NlfKind::Sinusoidal:
      for (std::size_t i = 0; i < len; ++i) dst[i] = std::sin(p0 * (src[i] + p1));
      return;
    case NlfKind::Monomial:
      for (std::size_t i = 0; i < len; ++i) {
        T x = src[i];
        if (x == T(0)) {
          dst[i] = T(0);
        } else {
          T mag = std::pow(std::abs(x), p0);
          dst[i] = x < T(0) ? -mag : mag;
        }
      }
      return;
    case NlfKind::Gaussian:
      for (std::size_t i = 0; i < len; ++i) {
        T e = p0 * src[i];
        dst[i] = std::exp(-e * e);
      }
      return;
    case NlfKind::Laplace:
      if (laplace_abs)
        for (std::size_t i = 0; i < len; ++i)
          dst[i] = (p0 / T(2)) * std::exp(-p0 * std::abs(src[i]));
      else
        for (std::size_t i = 0; i < len; ++i) dst[i] = (p0 / T(2)) * std::exp(-p0 * src[i]);
      return;
  }
}

// d/dx of nlf_eval. The monomial derivative at exactly 0 is defined as 0.
template <typename T>
inline T nlf_grad(NlfKind kind, bool laplace_abs, T p0, T p1, T x) {
  switch (kind) {
    case NlfKind::Sinusoidal:
      return p0 * std::cos(p0 * (x + p1));
    case NlfKind::Monomial: {
      if (x == T(0)) return T(0);
      return p0 * std::pow(std::abs(x), p0 - T(1));
    }
    case NlfKind::Gaussian: {
      T e = p0 * x;
      return T(-2) * p0 * e * std::exp(-e * e);
    }
    case NlfKind::Laplace: {
      if (!laplace_abs) return -(p0 * p0 / T(2)) * std::exp(-p0 * x);
      if (x == T(0)) return T(0);
      T s = x < T(0) ? T(-1) : T(1);
      return -s * (p0 * p0 / T(2)) * std::exp(-p0 * std::abs(x));
    }
  }
  return T(0);
}

}  // namespace detail

// Elementwise application with a single hyperparameter vector.
template <typename T>
TensorT<T> nlf_apply(NlfKind kind, const std::vector<double>& params, const TensorT<T>& x,
                     bool laplace_abs = false) {
  if (params.size() != nlf_arity(kind))
    throw ArityMismatch(std::string("nlf_apply: expected ") +
                        std::to_string(nlf_arity(kind)) + " hyperparameters for " +
                        nlf_name(kind));
  T p0 = T(params[0]);
  T p1 = params.size() > 1 ? T(params[1]) : T(0);
  TensorT<T> y(x.n, x.c, x.h, x.w);
  detail::nlf_eval_span(kind, laplace_abs, p0, p1, x.data.data(), y.data.data(),
                        x.data.size());
  return y;
}

// Slot j transforms the contiguous channel block [j*width, (j+1)*width).
template <typename T>
TensorT<T> nlf_apply_grouped(const HyperSet& hs, std::uint32_t slot_channel_width,
                             const TensorT<T>& x) {
  if (slot_channel_width == 0 || x.c != hs.slots() * slot_channel_width)
    throw ShapeMismatch("nlf_apply_grouped: c != slots * slot_channel_width");
  TensorT<T> y(x.n, x.c, x.h, x.w);
  std::size_t plane = std::size_t(x.h) * x.w;
  for (std::uint32_t in = 0; in < x.n; ++in)
    for (std::uint32_t slot = 0; slot < hs.slots(); ++slot) {
      T p0 = T(hs.param(0, slot));
      T p1 = nlf_arity(hs.kind()) > 1 ? T(hs.param(1, slot)) : T(0);
      std::size_t off = (std::size_t(in) * x.c + std::size_t(slot) * slot_channel_width) * plane;
      std::size_t len = std::size_t(slot_channel_width) * plane;
      detail::nlf_eval_span(hs.kind(), hs.laplace_abs(), p0, p1, x.data.data() + off,
                            y.data.data() + off, len);
    }
  return y;
}

}  // namespace groupnl
