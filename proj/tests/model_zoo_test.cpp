#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "groupnl/model_zoo.hpp"
#include "groupnl/train.hpp"

using namespace groupnl;

namespace {

double rel_err(double got, double want) { return std::abs(got - want) / want; }

std::vector<std::array<std::uint32_t, 3>> shape_trace(const Model& m) {
  std::vector<std::array<std::uint32_t, 3>> dims(m.prog.size());
  for (std::size_t i = 0; i < m.prog.size(); ++i) {
    const ModelOp& op = m.prog[i];
    switch (op.kind) {
      case ModelOp::Input: dims[i] = {m.in_c, m.in_h, m.in_w}; break;
      case ModelOp::Conv: {
        const ConvGeometry& g = m.layers[op.layer].spec.geom;
        dims[i] = {g.c_out, g.out_dim(dims[op.in0][1]), g.out_dim(dims[op.in0][2])};
        break;
      }
      case ModelOp::Gap: dims[i] = {dims[op.in0][0], 1, 1}; break;
      case ModelOp::Pool:
        dims[i] = {dims[op.in0][0], dims[op.in0][1] / 2, dims[op.in0][2] / 2};
        break;
      default: dims[i] = dims[op.in0];
    }
  }
  return dims;
}

}  // namespace

TEST(BuildModel, UnknownArchRejected) {
  EXPECT_THROW(build_model("resnet9000", Variant::Vanilla), UnknownArch);
}

TEST(BuildModel, VanillaResnet18MatchesReferenceCost) {
  Model m = build_model("resnet18", Variant::Vanilla);
  CostReport c = model_cost(m);
  EXPECT_LT(rel_err(double(c.params), 11.17e6), 0.02);
  EXPECT_LT(rel_err(double(c.flops), 556.04e6), 0.02);
}

TEST(BuildModel, GroupNlResnet18MatchesReferenceCost) {
  ZooOverrides ov;
  ov.r = 2;
  ov.g = 4;
  Model m = build_model("resnet18", Variant::GroupNL, ov);
  CostReport c = model_cost(m);
  EXPECT_LT(rel_err(double(c.params), 5.60e6), 0.03);
  EXPECT_LT(rel_err(double(c.flops), 279.49e6), 0.03);
}

TEST(BuildModel, SparseGroupNlResnet101MatchesReferenceCost) {
  ZooOverrides ov;
  ov.r = 2;
  ov.g = 4;
  Model m = build_model("resnet101", Variant::GroupNL, ov);
  CostReport c = model_cost(m);
  EXPECT_LT(rel_err(double(c.params), 18.5e6), 0.03);
  EXPECT_LT(rel_err(double(c.flops), 1159e6), 0.03);
  // bottleneck policy: sparse seed convolutions in the substituted layers
  bool saw_sparse = false;
  for (const auto& l : m.layers) saw_sparse |= l.spec.kind == LayerKind::GroupNLSparse;
  EXPECT_TRUE(saw_sparse);
}

TEST(BuildModel, ParamRatioGroupNlOverVanilla) {
  ZooOverrides ov;
  ov.r = 2;
  ov.g = 4;
  double vanilla = double(model_cost(build_model("resnet18", Variant::Vanilla)).params);
  double gnl = double(model_cost(build_model("resnet18", Variant::GroupNL, ov)).params);
  EXPECT_GE(gnl / vanilla, 0.48);
  EXPECT_LE(gnl / vanilla, 0.53);
}

TEST(BuildModel, SparseResnet101CostConstantOverReduction) {
  std::vector<double> params, flops;
  for (std::uint32_t r : {2u, 4u, 8u, 16u}) {
    ZooOverrides ov;
    ov.r = r;
    ov.g = 4;
    CostReport c = model_cost(build_model("resnet101", Variant::GroupNL, ov));
    params.push_back(double(c.params));
    flops.push_back(double(c.flops));
  }
  for (std::size_t i = 1; i < params.size(); ++i) {
    EXPECT_LT(rel_err(params[i], params[0]), 0.005);
    EXPECT_LT(rel_err(flops[i], flops[0]), 0.005);
  }
}

TEST(BuildModel, BasicBlockSubstitutionPolicy) {
  ZooOverrides ov;
  Model m = build_model("resnet18", Variant::GroupNL, ov);
  std::uint32_t substituted = 0, vanilla1x1 = 0, classifier = 0;
  for (const auto& l : m.layers) {
    if (l.spec.kind == LayerKind::GroupNLStd) {
      ++substituted;
      EXPECT_EQ(l.spec.geom.k, 3u);
    } else if (l.spec.geom.k == 1 && l.spec.geom.c_out != m.classes) {
      ++vanilla1x1;  // projection shortcuts stay vanilla on basic blocks
      EXPECT_EQ(l.spec.kind, LayerKind::Vanilla);
    } else if (l.spec.geom.c_out == m.classes) {
      ++classifier;
      EXPECT_EQ(l.spec.kind, LayerKind::Vanilla);
    }
  }
  EXPECT_EQ(substituted, 17u);  // stem + 16 block convs
  EXPECT_EQ(vanilla1x1, 3u);
  EXPECT_EQ(classifier, 1u);
}

TEST(ForwardModel, LogitsShape) {
  Model m = build_model("tinycnn", Variant::GroupNL);
  Tensor x = Tensor::uniform(2, 3, 16, 16, 3);
  Tensor logits = forward_model(m, x);
  EXPECT_EQ(logits.n, 2u);
  EXPECT_EQ(logits.c, 10u);
  EXPECT_EQ(logits.h, 1u);
  EXPECT_EQ(logits.w, 1u);
}

TEST(ForwardModel, ZeroInputGivesFiniteLogits) {
  for (Variant v : {Variant::Vanilla, Variant::Ghost, Variant::SineFM, Variant::GroupNL}) {
    Model m = build_model("tinycnn", v);
    Tensor x(1, 3, 16, 16);
    Tensor logits = forward_model(m, x);
    for (float val : logits.data) EXPECT_TRUE(std::isfinite(val)) << variant_name(v);
  }
}

TEST(ForwardModel, ResnetZeroInputFinite) {
  ZooOverrides ov;
  Model m = build_model("resnet18", Variant::GroupNL, ov);
  Tensor x(1, 3, 32, 32);
  Tensor logits = forward_model(m, x);
  EXPECT_EQ(logits.c, 10u);
  for (float val : logits.data) EXPECT_TRUE(std::isfinite(val));
}

TEST(ForwardModel, WrongChannelCountRejected) {
  Model m = build_model("tinycnn", Variant::Vanilla);
  Tensor x(1, 4, 16, 16);
  EXPECT_THROW(forward_model(m, x), ShapeMismatch);
}

// hand-assembled chain over the same layers must reproduce the program walker
TEST(ForwardModel, TinyCnnMatchesHandAssembledChain) {
  Model m = build_model("tinycnn", Variant::GroupNL);
  ASSERT_EQ(m.layers.size(), 4u);
  ASSERT_EQ(m.bns.size(), 3u);
  Tensor x = Tensor::uniform(2, 3, 16, 16, 9);
  Tensor want = x;
  for (int i = 0; i < 3; ++i) {
    want = layer_forward(m.layers[i], want);
    detail::bn_eval_inplace(m.bns[i], want);
    for (auto& v : want.data) v = v > 0.f ? v : 0.f;
  }
  // global average pool, double accumulator per channel
  Tensor pooled(want.n, want.c, 1, 1);
  std::size_t plane = std::size_t(want.h) * want.w;
  for (std::uint32_t n = 0; n < want.n; ++n)
    for (std::uint32_t c = 0; c < want.c; ++c) {
      double s = 0;
      const float* p = want.data.data() + (std::size_t(n) * want.c + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      pooled.at(n, c, 0, 0) = float(s / double(plane));
    }
  Tensor want_logits = layer_forward(m.layers[3], pooled);
  EXPECT_TRUE(bitwise_equal(forward_model(m, x), want_logits));
}

TEST(ForwardModel, BlockShapesInvariantAcrossVariants) {
  auto base = shape_trace(build_model("resnet18", Variant::Vanilla));
  for (Variant v : {Variant::Mono, Variant::Ghost, Variant::SineFM, Variant::GroupNL}) {
    auto got = shape_trace(build_model("resnet18", v));
    EXPECT_EQ(got, base) << variant_name(v);
  }
}

TEST(ArchConfigs, UserSuppliedConfigNeedsNoCodeChange) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "groupnl_arch_test";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "microcnn.json");
    os << R"({
      "schema_version": 1,
      "name": "microcnn",
      "family": "plain",
      "convs": [ { "out": 8, "stride": 1 }, { "out": 12, "stride": 2 } ],
      "classes": 4,
      "input": [3, 8, 8]
    })";
  }
  Model m = build_model("microcnn", Variant::GroupNL, {}, dir.string());
  Tensor x = Tensor::uniform(1, 3, 8, 8, 2);
  Tensor logits = forward_model(m, x);
  EXPECT_EQ(logits.c, 4u);
  fs::remove_all(dir);
}

TEST(ArchConfigs, UnsupportedSchemaVersionRejected) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "groupnl_arch_bad";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "future.json");
    os << R"({ "schema_version": 2, "family": "plain", "convs": [] })";
  }
  EXPECT_THROW(build_model("future", Variant::Vanilla, {}, dir.string()), InvalidSpec);
  fs::remove_all(dir);
}

TEST(ArchConfigs, ClassifierKeepsClassesOverride) {
  ZooOverrides ov;
  ov.classes = 7;
  Model m = build_model("tinycnn", Variant::Vanilla, ov);
  Tensor x = Tensor::uniform(1, 3, 16, 16, 4);
  EXPECT_EQ(forward_model(m, x).c, 7u);
}
