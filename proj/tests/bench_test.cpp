#include <gtest/gtest.h>

#include "groupnl/bench.hpp"

using namespace groupnl;

namespace {

// scaled-down geometry so timing properties can be checked quickly
BenchConfig small_cfg(std::uint32_t iters, std::uint32_t warmup) {
  BenchConfig cfg;
  cfg.in_n = 1;
  cfg.in_c = 128;
  cfg.in_h = 16;
  cfg.in_w = 16;
  cfg.iters = iters;
  cfg.warmup = warmup;
  cfg.seed = 3;
  return cfg;
}

LayerSpec small_spec(LayerKind kind, std::uint32_t r) {
  LayerSpec s = profiling_preset_spec(kind, r);
  s.geom.c_in = 128;
  s.geom.c_out = 128;
  return s;
}

}  // namespace

TEST(Bench, SingleIterationCollapsesPercentiles) {
  BenchConfig cfg = small_cfg(1, 0);
  BenchReport rep = profile_layer(small_spec(LayerKind::GroupNLStd, 4), cfg);
  EXPECT_EQ(rep.mean_ms, rep.median_ms);
  EXPECT_EQ(rep.mean_ms, rep.p95_ms);
  EXPECT_GT(rep.mean_ms, 0.0);
}

TEST(Bench, FpsIsInverseMeanLatency) {
  BenchConfig cfg = small_cfg(10, 2);
  BenchReport rep = profile_layer(small_spec(LayerKind::GroupNLStd, 4), cfg);
  EXPECT_NEAR(rep.fps, 1000.0 / rep.mean_ms, 1e-6 * rep.fps);
}

TEST(Bench, ReportEchoesConfigAndHost) {
  BenchConfig cfg = small_cfg(2, 0);
  cfg.fresh_input = true;
  BenchReport rep = profile_layer(small_spec(LayerKind::Vanilla, 1), cfg);
  EXPECT_EQ(rep.config.iters, 2u);
  EXPECT_TRUE(rep.config.fresh_input);
  EXPECT_FALSE(rep.host.empty());
  EXPECT_EQ(rep.target, "vanilla");
}

TEST(Bench, ZeroIterationsRejected) {
  BenchConfig cfg = small_cfg(0, 0);
  EXPECT_THROW(profile_layer(small_spec(LayerKind::Vanilla, 1), cfg), InvalidSpec);
}

TEST(Bench, ModelProfileRuns) {
  Model m = build_model("tinycnn", Variant::GroupNL);
  BenchConfig cfg;
  cfg.in_n = 1;
  cfg.in_c = 3;
  cfg.in_h = 16;
  cfg.in_w = 16;
  cfg.iters = 3;
  cfg.warmup = 1;
  BenchReport rep = profile_model(m, cfg);
  EXPECT_GT(rep.mean_ms, 0.0);
  EXPECT_EQ(rep.target, "tinycnn/groupnl");
}

// coarse ordering on the scaled geometry: half the multiply-accumulates
// should not be slower than the full conv (wide margin for timer noise)
TEST(Bench, ReducedSeedConvBeatsFullConv) {
  BenchConfig cfg = small_cfg(12, 3);
  double full = profile_layer(small_spec(LayerKind::Vanilla, 1), cfg).mean_ms;
  double gnl4 = profile_layer(small_spec(LayerKind::GroupNLStd, 4), cfg).mean_ms;
  EXPECT_LT(gnl4, full * 1.15) << "gnl4=" << gnl4 << " full=" << full;
}

TEST(Bench, LatencyDecreasesWithReduction) {
  BenchConfig cfg = small_cfg(12, 3);
  double r2 = profile_layer(small_spec(LayerKind::GroupNLStd, 2), cfg).mean_ms;
  double r8 = profile_layer(small_spec(LayerKind::GroupNLStd, 8), cfg).mean_ms;
  EXPECT_LT(r8, r2 * 1.15) << "r8=" << r8 << " r2=" << r2;
}

// the nlf-only generation path stays ahead of the branch-heavy sinefm stack
TEST(Bench, GroupNlFasterThanSineFm) {
  BenchConfig cfg = small_cfg(12, 3);
  for (std::uint32_t r : {2u, 8u}) {
    double gnl = profile_layer(small_spec(LayerKind::GroupNLStd, r), cfg).mean_ms;
    double sfm = profile_layer(small_spec(LayerKind::SineFM, r), cfg).mean_ms;
    EXPECT_LT(gnl, sfm * 1.10) << "r=" << r << " gnl=" << gnl << " sinefm=" << sfm;
  }
}
