#pragma once

// Wall-clock micro-benchmarking of single layers and whole models: seeded
// deterministic input streams, warmup iterations excluded, latency
// percentiles and throughput.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "layers.hpp"
#include "model_zoo.hpp"

namespace groupnl {

struct BenchConfig {
  std::uint32_t in_n = 1, in_c = 512, in_h = 32, in_w = 32;
  std::uint32_t warmup = 10;
  std::uint32_t iters = 100;
  int threads = 1;
  std::uint64_t seed = 0;
  bool fresh_input = false;  // cycle a pool of distinct inputs instead of reusing one
};

struct BenchReport {
  double mean_ms = 0;
  double median_ms = 0;
  double p95_ms = 0;
  double fps = 0;
  BenchConfig config;
  std::string target;
  std::string host;
};

inline std::string host_descriptor() {
  std::string model = "unknown-cpu";
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) model = line.substr(pos + 2);
      break;
    }
  }
  return model;
}

namespace detail {

inline BenchReport run_timed(const std::function<void(const Tensor&)>& fwd,
                             const BenchConfig& cfg, const std::string& target) {
  if (cfg.iters < 1) throw InvalidSpec("bench: iterations must be >= 1");
  set_num_threads(cfg.threads);

  std::uint32_t pool_size = cfg.fresh_input ? std::min<std::uint32_t>(cfg.iters, 8) : 1;
  std::vector<Tensor> pool;
  pool.reserve(pool_size);
  for (std::uint32_t i = 0; i < pool_size; ++i)
    pool.push_back(Tensor::uniform(cfg.in_n, cfg.in_c, cfg.in_h, cfg.in_w,
                                   detail::mix_seed(cfg.seed, i), -1.f, 1.f));

  for (std::uint32_t i = 0; i < cfg.warmup; ++i) fwd(pool[i % pool_size]);

  std::vector<double> samples;
  samples.reserve(cfg.iters);
  for (std::uint32_t i = 0; i < cfg.iters; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    fwd(pool[i % pool_size]);
    auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }

  BenchReport rep;
  rep.config = cfg;
  rep.target = target;
  rep.host = host_descriptor();
  double sum = 0;
  for (double s : samples) sum += s;
  rep.mean_ms = sum / double(samples.size());
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  rep.median_ms = sorted[sorted.size() / 2];
  rep.p95_ms = sorted[std::min(sorted.size() - 1, std::size_t(0.95 * double(sorted.size())))];
  rep.fps = rep.mean_ms > 0 ? 1000.0 * cfg.in_n / rep.mean_ms : 0;
  return rep;
}

}  // namespace detail

inline BenchReport profile_layer(const LayerSpec& spec, const BenchConfig& cfg,
                                 std::uint64_t build_seed = 1) {
  Layer layer = build_layer(spec, build_seed);
  std::string target = std::string(layer_kind_name(spec.kind));
  volatile float sink = 0;
  auto fwd = [&](const Tensor& x) {
    Tensor y = layer_forward(layer, x);
    sink = sink + y.data[0];
  };
  return detail::run_timed(fwd, cfg, target);
}

inline BenchReport profile_model(const Model& m, const BenchConfig& cfg) {
  volatile float sink = 0;
  auto fwd = [&](const Tensor& x) {
    Tensor y = forward_model(m, x);
    sink = sink + y.data[0];
  };
  return detail::run_timed(fwd, cfg, m.arch + "/" + m.variant);
}

// The module-level profiling scenario: 512 -> 512 channels, 3x3 kernel,
// stride 2, pad 1 on a (512, 32, 32) input.
inline LayerSpec profiling_preset_spec(LayerKind kind, std::uint32_t r) {
  LayerSpec s;
  s.kind = kind;
  s.geom = ConvGeometry{512, 512, 3, 2, 1, 1, true};
  s.r = r;
  s.g = 4;
  s.nlf = NlfSpec::of(kind == LayerKind::Mono ? NlfKind::Monomial : NlfKind::Sinusoidal);
  s.seed = 7;
  return s;
}

}  // namespace groupnl
