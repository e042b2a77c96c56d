#pragma once

// Closed-form parameter / FLOP / gradient accounting for single layers and
// whole models, plus data-parallel gradient-communication volumes.
//
// Conventions (chosen to reproduce the reference module-level profile):
//  - one FLOP == one multiply-accumulate for conv and linear terms,
//    evaluated at the *output* spatial size;
//  - elementwise NLF generation costs 1 op per generated-feature element;
//  - BN costs 2 ops per normalized element;
//  - bias adds contribute parameters (when enabled) but no FLOPs.

#include <cstdint>
#include <string>
#include <vector>

#include "layers.hpp"

namespace groupnl {

struct CostTerm {
  std::string label;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t grads = 0;        // == params for every supported layer family
  std::uint64_t ops_modules = 0;  // trainable neural-network modules
  std::vector<CostTerm> breakdown;

  void add(const std::string& label, std::uint64_t p, std::uint64_t f) {
    breakdown.push_back({label, p, f});
    params += p;
    flops += f;
    grads += p;
  }
};

enum class CommMode { DP, DDP };

struct CommReport {
  CommMode mode = CommMode::DDP;
  std::uint32_t n_gpus = 1;
  double grads = 0;
  double per_gpu = 0;  // DP: volume through the main GPU; DDP: per-GPU ring volume
  double total = 0;
};

inline CostReport layer_cost(const LayerSpec& spec, std::uint32_t in_h, std::uint32_t in_w) {
  spec.validate();
  const ConvGeometry& geom = spec.geom;
  std::uint64_t oh = geom.out_dim(in_h);
  std::uint64_t ow = geom.out_dim(in_w);
  std::uint64_t hw = oh * ow;
  std::uint64_t k2 = std::uint64_t(geom.k) * geom.k;
  std::uint64_t cs = spec.c_seed();
  std::uint64_t cgen = spec.c_gen();

  CostReport rep;
  ConvGeometry sg = spec.seed_geom();
  std::uint64_t seed_w = std::uint64_t(sg.c_out) * (sg.c_in / sg.groups) * k2;
  std::uint64_t seed_macs = hw * seed_w;

  switch (spec.kind) {
    case LayerKind::Vanilla:
    case LayerKind::Depthwise:
      rep.add("conv", seed_w, seed_macs);
      if (geom.bias) rep.add("bias", geom.c_out, 0);
      rep.ops_modules = 1;
      break;
    case LayerKind::Mono:
      // the conv itself runs over the full generated filter bank
      rep.add("seed conv", seed_w, hw * std::uint64_t(geom.c_out) * geom.c_in * k2);
      if (geom.bias) rep.add("bias", geom.c_out, 0);
      rep.ops_modules = 1;
      break;
    case LayerKind::Ghost:
      rep.add("seed conv", seed_w, seed_macs);
      if (cgen > 0) {
        std::uint64_t d2 = std::uint64_t(spec.d) * spec.d;
        rep.add("cheap conv", cgen * d2, hw * cgen * d2);
      }
      if (geom.bias) rep.add("bias", cs + cgen, 0);
      rep.ops_modules = 2;
      break;
    case LayerKind::SineFM:
      rep.add("seed conv", seed_w, seed_macs);
      if (cgen > 0) {
        rep.add("pointwise conv", cgen * spec.t, hw * cgen * spec.t);
        rep.add("bn", 2ull * spec.t * cs, 2ull * spec.t * cs * hw);
        rep.add("nlf", 0, cgen * hw);
      }
      if (geom.bias) rep.add("bias", cs + cgen, 0);
      rep.ops_modules = 2 + spec.t;
      break;
    case LayerKind::GroupNLStd:
    case LayerKind::GroupNLSparse:
      rep.add("seed conv", seed_w, seed_macs);
      if (cgen > 0) rep.add("nlf", 0, cgen * hw);
      if (geom.bias) rep.add("bias", cs, 0);
      rep.ops_modules = 1;
      break;
  }
  return rep;
}

inline CommReport comm_cost(double grads, std::uint32_t n_gpus, CommMode mode) {
  if (n_gpus == 0) throw InvalidSpec("comm_cost: n_gpus must be >= 1");
  CommReport r;
  r.mode = mode;
  r.n_gpus = n_gpus;
  r.grads = grads;
  double n = double(n_gpus);
  if (mode == CommMode::DP) {
    r.per_gpu = (n - 1) * grads;           // main GPU; each of the others sends grads
    r.total = 2 * (n - 1) * grads;
  } else {
    r.per_gpu = 2 * (n - 1) / n * grads;   // ring all-reduce volume per device
    r.total = r.per_gpu * n;
  }
  return r;
}

inline std::uint64_t nlf_diversity(std::uint32_t c_seed, std::uint32_t c_out, std::uint32_t g) {
  if (g == 0 || c_seed == 0 || c_seed % g != 0)
    throw NonDivisibleChannels("nlf_diversity: c_seed must be a positive multiple of g");
  std::uint64_t gamma = (c_out + c_seed - 1) / c_seed - 1;
  return gamma * g;
}

}  // namespace groupnl
