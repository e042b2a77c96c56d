#include <gtest/gtest.h>

#include "groupnl/autodiff.hpp"
#include "groupnl/cost_model.hpp"
#include "groupnl/model_zoo.hpp"
#include "groupnl/verify.hpp"

using namespace groupnl;

TEST(Backward, LossMustBeScalar) {
  Tape<float> tape;
  int x = tape.leaf(Tensor::uniform(1, 2, 3, 3, 1), "x");
  EXPECT_THROW(tape.backward(x), NonScalarLoss);
}

// loss = sum(conv(x, w)) for a 1x1 conv: dL/dW[oc][ic] = sum over positions of x[ic]
TEST(Backward, ConvWeightGradIsSumOfInputWindows) {
  Tape<float> tape;
  Tensor x = Tensor::uniform(2, 3, 4, 4, 2);
  int xn = tape.constant(x);
  int wn = tape.leaf(Tensor::uniform(2, 3, 1, 1, 3), "w");
  ConvGeometry g{3, 2, 1, 1, 0, 1, false};
  int y = tape.conv(xn, wn, -1, g);
  int loss = tape.sum(y);
  tape.backward(loss);
  Tensor dw = tape.gradients().at("w");
  for (std::uint32_t oc = 0; oc < 2; ++oc)
    for (std::uint32_t ic = 0; ic < 3; ++ic) {
      double want = 0;
      for (std::uint32_t n = 0; n < 2; ++n)
        for (std::uint32_t yy = 0; yy < 4; ++yy)
          for (std::uint32_t xx = 0; xx < 4; ++xx) want += x.at(n, ic, yy, xx);
      EXPECT_NEAR(dw.at(oc, ic, 0, 0), want, 1e-4);
    }
}

TEST(Backward, RepeatAdjointSumsCopies) {
  Tape<float> tape;
  int x = tape.leaf(Tensor::uniform(1, 2, 3, 3, 4), "x");
  int r = tape.repeat_channels(x, 3);
  int loss = tape.sum(r);
  tape.backward(loss);
  Tensor dx = tape.gradients().at("x");
  for (float v : dx.data) EXPECT_FLOAT_EQ(v, 3.f);
}

TEST(Backward, SliceConcatRoutesGradients) {
  Tape<float> tape;
  int x = tape.leaf(Tensor::uniform(1, 4, 2, 2, 5), "x");
  int a = tape.slice_channels(x, 0, 2);
  int b = tape.slice_channels(x, 2, 4);
  int cat = tape.concat_channels({b, a});  // swapped order
  Tensor p = Tensor::uniform(1, 4, 2, 2, 6);
  int loss = tape.weighted_sum(cat, p);
  tape.backward(loss);
  Tensor dx = tape.gradients().at("x");
  // channel 0..1 of x land in channels 2..3 of cat and vice versa
  for (std::uint32_t c = 0; c < 2; ++c)
    for (std::uint32_t y = 0; y < 2; ++y)
      for (std::uint32_t xx = 0; xx < 2; ++xx) {
        EXPECT_FLOAT_EQ(dx.at(0, c, y, xx), p.at(0, c + 2, y, xx));
        EXPECT_FLOAT_EQ(dx.at(0, c + 2, y, xx), p.at(0, c, y, xx));
      }
}

TEST(Backward, GroupNlGradientMapContainsOnlySeedParams) {
  LayerSpec s;
  s.kind = LayerKind::GroupNLStd;
  s.geom = ConvGeometry{4, 8, 3, 1, 1, 1, true};
  s.r = 2;
  s.g = 2;
  s.seed = 3;
  Layer layer = build_layer(s, 4);
  Tape<float> tape;
  int x = tape.constant(Tensor::uniform(1, 4, 5, 5, 5));
  LayerNodes<float> nodes = trace_layer(tape, layer, x, false);
  int loss = tape.sum(nodes.output);
  tape.backward(loss);
  auto grads = tape.gradients();
  EXPECT_EQ(grads.size(), 2u);
  EXPECT_TRUE(grads.count("seed_w"));
  EXPECT_TRUE(grads.count("seed_b"));
  EXPECT_EQ(tape.trainable_scalar_count(), count_trainable(layer));
}

TEST(Backward, UnusedLeafReportsZeros) {
  Tape<float> tape;
  int used = tape.leaf(Tensor::uniform(1, 1, 2, 2, 7), "used");
  int unused = tape.leaf(Tensor::uniform(1, 1, 2, 2, 8), "unused");
  (void)unused;
  int loss = tape.sum(used);
  tape.backward(loss);
  auto grads = tape.gradients();
  for (float v : grads.at("unused").data) EXPECT_EQ(v, 0.f);
  for (float v : grads.at("used").data) EXPECT_EQ(v, 1.f);
}

TEST(FiniteDiff, VanillaPointwiseConvIsExactlyLinear) {
  LayerSpec s;
  s.kind = LayerKind::Vanilla;
  s.geom = ConvGeometry{3, 4, 1, 1, 0, 1, true};
  Layer layer = build_layer(s, 1);
  Tensor x = Tensor::uniform(1, 3, 4, 4, 2);
  EXPECT_LT(finite_diff_check(layer, x, 1e-5), 1e-9);
}

TEST(FiniteDiff, GroupNlSmallLayer) {
  LayerSpec s;
  s.kind = LayerKind::GroupNLStd;
  s.geom = ConvGeometry{3, 8, 3, 1, 1, 1, true};
  s.r = 2;
  s.g = 2;
  s.seed = 11;
  Layer layer = build_layer(s, 12);
  Tensor x = Tensor::uniform(1, 3, 5, 5, 13);
  EXPECT_LT(finite_diff_check(layer, x, 1e-5), 1e-6);
}

TEST(FiniteDiff, SineFmEvalModeFrozenStats) {
  LayerSpec s;
  s.kind = LayerKind::SineFM;
  s.geom = ConvGeometry{2, 6, 3, 1, 1, 1, true};
  s.r = 3;
  s.t = 2;
  s.seed = 21;
  Layer layer = build_layer(s, 22);
  // non-identity frozen stats so the bn path is actually exercised
  for (auto& bn : layer.bns)
    for (std::uint32_t c = 0; c < bn.channels(); ++c) {
      bn.run_mean[c] = 0.1f * float(c + 1);
      bn.run_var[c] = 0.5f + 0.2f * float(c);
      bn.gamma[c] = 1.2f;
      bn.beta[c] = -0.3f;
    }
  Tensor x = Tensor::uniform(1, 2, 5, 5, 23);
  EXPECT_LT(finite_diff_check(layer, x, 1e-5), 1e-6);
}

TEST(FiniteDiff, EveryVariantUnderThreshold) {
  SuiteResult r = verify_gradcheck(31415, 1e-5, 1e-5);
  EXPECT_TRUE(r.ok()) << r.detail;
}

namespace {

// central differences through an arbitrary tape program over one leaf
template <typename BuildFn>
void check_tape_program(BuildFn build, Tensor theta0, double eps, double tol) {
  Tape<double> tape;
  int leaf = tape.leaf(theta0.cast<double>(), "theta");
  int loss = build(tape, leaf);
  tape.backward(loss);
  Tensor64 g_ad = tape.gradients().at("theta");

  for (std::size_t i = 0; i < theta0.data.size(); ++i) {
    auto eval = [&](double delta) {
      Tensor64 t = theta0.cast<double>();
      t.data[i] += delta;
      Tape<double> t2;
      int l2 = t2.leaf(std::move(t), "theta");
      int loss2 = build(t2, l2);
      return t2.value(loss2).data[0];
    };
    double g_fd = (eval(eps) - eval(-eps)) / (2 * eps);
    EXPECT_NEAR(g_ad.data[i], g_fd, tol * std::max(1.0, std::abs(g_fd))) << "scalar " << i;
  }
}

}  // namespace

TEST(FiniteDiff, TrainModeBatchNorm) {
  Tensor x0 = Tensor::uniform(2, 3, 4, 4, 31);
  Tensor proj = Tensor::uniform(2, 3, 4, 4, 32);
  Tensor64 proj64 = proj.cast<double>();
  auto build = [&](Tape<double>& tape, int xleaf) {
    TensorT<double> gv(1, 3, 1, 1), bv(1, 3, 1, 1);
    gv.data = {1.1, 0.9, 1.3};
    bv.data = {0.1, -0.2, 0.0};
    int g = tape.leaf(std::move(gv), "gamma");
    int b = tape.leaf(std::move(bv), "beta");
    BatchNormParams bn(3);  // running-stat updates don't affect the value
    int y = tape.bn_train(xleaf, g, b, bn);
    return tape.weighted_sum(y, proj64);
  };
  check_tape_program(build, x0, 1e-5, 1e-6);
}

TEST(FiniteDiff, TrainModeBatchNormAffineParams) {
  Tensor x = Tensor::uniform(2, 2, 3, 3, 41);
  Tensor64 x64 = x.cast<double>();
  Tensor64 proj = Tensor64::uniform(2, 2, 3, 3, 42);
  Tensor gb0(1, 4, 1, 1);  // gamma(2) ++ beta(2) packed in one leaf
  gb0.data = {1.2f, 0.8f, 0.1f, -0.4f};
  auto build = [&](Tape<double>& tape, int gbleaf) {
    int xn = tape.constant(x64);
    int g = tape.slice_channels(gbleaf, 0, 2);
    int b = tape.slice_channels(gbleaf, 2, 4);
    BatchNormParams bn(2);
    int y = tape.bn_train(xn, g, b, bn);
    return tape.weighted_sum(y, proj);
  };
  check_tape_program(build, gb0, 1e-5, 1e-6);
}

TEST(FiniteDiff, SoftmaxCrossEntropy) {
  Tensor logits0 = Tensor::uniform(3, 4, 1, 1, 51, -2.f, 2.f);
  std::vector<int> labels{1, 3, 0};
  auto build = [&](Tape<double>& tape, int leaf) {
    return tape.softmax_cross_entropy(leaf, labels);
  };
  check_tape_program(build, logits0, 1e-6, 1e-6);
}

TEST(FiniteDiff, MaxPoolRoutesToArgmax) {
  Tensor x0 = Tensor::uniform(1, 2, 4, 4, 61);
  Tensor64 proj = Tensor64::uniform(1, 2, 2, 2, 62);
  auto build = [&](Tape<double>& tape, int leaf) {
    int y = tape_max_pool2x2(tape, leaf);
    return tape.weighted_sum(y, proj);
  };
  check_tape_program(build, x0, 1e-7, 1e-5);
}

TEST(FiniteDiff, GlobalAvgPoolAndRelu) {
  Tensor x0 = Tensor::uniform(2, 3, 3, 3, 71);
  Tensor64 proj = Tensor64::uniform(2, 3, 1, 1, 72);
  auto build = [&](Tape<double>& tape, int leaf) {
    int y = tape.global_avg_pool(tape.relu(leaf));
    return tape.weighted_sum(y, proj);
  };
  check_tape_program(build, x0, 1e-6, 1e-5);
}

TEST(CountTrainable, MatchesAnalyticForKnownCases) {
  {
    LayerSpec s;
    s.kind = LayerKind::GroupNLStd;
    s.geom = ConvGeometry{512, 512, 3, 2, 1, 1, false};
    s.r = 2;
    s.g = 4;
    Layer l = build_layer(s, 1);
    EXPECT_EQ(count_trainable(l), 1179648u);
  }
  {
    LayerSpec s;
    s.kind = LayerKind::GroupNLSparse;
    s.geom = ConvGeometry{512, 512, 3, 2, 1, 1, false};
    s.r = 2;
    s.g = 4;
    Layer l = build_layer(s, 1);
    EXPECT_EQ(count_trainable(l), 4608u);
  }
}

TEST(CountTrainable, MatchesAnalyticAcrossRandomSpecs) {
  SuiteResult r = verify_counts(20, 2718);
  EXPECT_TRUE(r.ok()) << r.passed << "/" << r.passed + r.failed;
}

TEST(CountTrainable, ModelTapeAndCostAgree) {
  Model m = build_model("tinycnn", Variant::GroupNL);
  Tape<float> tape;
  int x = tape.constant(Tensor::uniform(2, 3, 16, 16, 5));
  ModelTrace<float> tr = trace_model(tape, m, x, false);
  (void)tr;
  EXPECT_EQ(tape.trainable_scalar_count(), count_trainable(m));
  EXPECT_EQ(count_trainable(m), model_cost(m).params);
}
