#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "s2fpn/decoder.hpp"
#include "s2fpn/pyramid.hpp"
#include "synthetic.hpp"

namespace s2fpn {
namespace {

using testing::random_tensor;

ApfSpec small_spec(std::int64_t width = 8) {
  ApfSpec s;
  s.level = 3;
  s.low_channels = 6;
  s.coarse_channels = 10;
  s.width = width;
  s.num_classes = 5;
  return s;
}

TEST(Cfgb, HalvesSpatialDims) {
  std::mt19937_64 rng(1);
  Cfgb<float> cfgb(512, 128, rng);
  cfgb.eval();
  const auto y = cfgb.forward(Tensor<float>::meta(Shape{1, 512, 16, 32}));
  EXPECT_EQ(y.shape(), (Shape{1, 128, 8, 16}));
  EXPECT_THROW(cfgb.forward(Tensor<float>::meta(Shape{1, 512, 1, 1})), DimensionError);
}

TEST(Fab, PreservesSpatialDims) {
  std::mt19937_64 rng(2);
  Fab<float> fab(512, 96, rng);
  fab.eval();
  EXPECT_EQ(fab.forward(Tensor<float>::meta(Shape{2, 512, 16, 32})).shape(), (Shape{2, 96, 16, 32}));
}

TEST(DepthwiseProjection, DepthwiseStageMatchesGroupedConvOracle) {
  for (int stride : {1, 2}) {
    std::mt19937_64 rng(3);
    DepthwiseProjection<double> m(6, 4, stride, rng);
    testing::randomize_module(m, rng);
    m.eval();
    const auto x = random_tensor<double>(Shape{1, 6, 7, 8}, rng);
    EXPECT_EQ(m.depthwise.spec().groups, 6);
    const auto dw = m.depthwise_forward(x);
    EXPECT_LT(oracle::max_abs_diff(dw, oracle::conv2d(oracle::of(x), m.depthwise)), 1e-12);
    const auto full = oracle::conv_bn_act(oracle::conv2d(oracle::of(x), m.depthwise), m.pointwise);
    EXPECT_LT(oracle::max_abs_diff(m.forward(x), full), 1e-12);
  }
}

TEST(DepthwiseProjection, ConstantInputGivesConstantInterior) {
  for (int stride : {1, 2}) {
    std::mt19937_64 rng(4);
    DepthwiseProjection<double> m(4, 3, stride, rng);
    testing::randomize_module(m, rng);
    m.eval();
    const auto y = m.forward(Tensor<double>::full(Shape{1, 4, 10, 12}, 0.7));
    const Shape s = y.shape();
    for (std::int64_t c = 0; c < s.c; ++c) {
      const double ref = y.at(0, c, 1, 1);
      for (std::int64_t h = 1; h < s.h - 1; ++h)
        for (std::int64_t w = 1; w < s.w - 1; ++w) EXPECT_NEAR(y.at(0, c, h, w), ref, 1e-13);
    }
  }
}

TEST(ApfStage, ShapeContract) {
  std::mt19937_64 rng(5);
  ApfSpec spec;
  spec.level = 2;
  spec.low_channels = 32;
  spec.coarse_channels = 32;
  spec.width = 32;
  spec.num_classes = 7;
  ApfStage<float> stage(spec, rng);
  stage.train();
  const auto t = stage.trace(Tensor<float>::meta(Shape{1, 32, 32, 64}), Tensor<float>::meta(Shape{1, 32, 64, 128}));
  EXPECT_EQ(t.out.shape(), (Shape{1, 32, 64, 128}));
  EXPECT_EQ(t.aux.shape(), (Shape{1, 7, 64, 128}));
  EXPECT_EQ(t.up.shape(), t.lateral.shape());
  EXPECT_EQ(t.concat.shape(), (Shape{1, 64, 64, 128}));
  EXPECT_EQ(t.channel_gate.shape(), (Shape{1, 32, 1, 1}));

  stage.eval();
  const auto [out, aux] = stage.forward(Tensor<float>::meta(Shape{1, 32, 32, 64}),
                                        Tensor<float>::meta(Shape{1, 32, 64, 128}));
  EXPECT_FALSE(aux.defined());
  stage.force_aux = true;
  EXPECT_TRUE(stage.forward(Tensor<float>::meta(Shape{1, 32, 32, 64}), Tensor<float>::meta(Shape{1, 32, 64, 128}))
                  .second.defined());
}

TEST(ApfStage, UpsampledCoarseMatchesLowLevelDimsOverRandomSizes) {
  std::mt19937_64 rng(6);
  ApfStage<float> stage(small_spec(), rng);
  stage.eval();
  for (int i = 0; i < 10; ++i) {
    const std::int64_t h = 1 + static_cast<std::int64_t>(uniform_index(rng, 12));
    const std::int64_t w = 1 + static_cast<std::int64_t>(uniform_index(rng, 12));
    const auto t = stage.trace(Tensor<float>::meta(Shape{2, 10, h, w}), Tensor<float>::meta(Shape{2, 6, 2 * h, 2 * w}));
    EXPECT_EQ(t.up.shape(), (Shape{2, 8, 2 * h, 2 * w}));
    EXPECT_EQ(t.out.shape(), (Shape{2, 8, 2 * h, 2 * w}));
  }
  EXPECT_THROW(stage.trace(Tensor<float>::meta(Shape{1, 10, 8, 8}), Tensor<float>::meta(Shape{1, 6, 4, 4})),
               DimensionError);
  EXPECT_THROW(stage.trace(Tensor<float>::meta(Shape{1, 10, 2, 2}), Tensor<float>::meta(Shape{2, 6, 4, 4})),
               DimensionError);
}

TEST(ApfStage, BranchesMatchOracleAndFuseAdditively) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    ApfStage<float> stage(small_spec(), rng);
    testing::randomize_module(stage, rng, 0.4);
    stage.ssam.alpha.data()[0] = 0.6f;
    stage.eval();
    const auto coarse = random_tensor<float>(Shape{1, 10, 3, 2}, rng);
    const auto low = random_tensor<float>(Shape{1, 6, 6, 4}, rng);
    const auto t = stage.trace(coarse, low);

    // Exact additivity from the exposed intermediates.
    EXPECT_EQ(oracle::max_abs_diff(t.fused, oracle::add<float>(oracle::of(t.x_a), oracle::of(t.x_b))), 0.0);

    // Branches recomputed by scalar loops from the stage's intermediates.
    const auto b = oracle::apf_branches(oracle::of(t.lateral), oracle::of(t.up), oracle::of(t.refined), stage);
    EXPECT_LT(oracle::max_abs_diff(t.x_a, b.x_a), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(t.x_b, b.x_b), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(t.fused, b.fused), 1e-6);

    // And the whole stage from its raw inputs.
    EXPECT_LT(oracle::max_abs_diff(t.fused, oracle::apf_stage(oracle::of(coarse), oracle::of(low), stage)), 1e-5);
  }
}

TEST(ApfStage, ZeroChannelGateLeavesOnlyStripBranch) {
  std::mt19937_64 rng(7);
  ApfStage<float> stage(small_spec(), rng);
  testing::randomize_module(stage, rng, 0.4);
  stage.eval();
  for (auto& v : stage.cam.excite_conv.weight.data()) v = 0.0f;
  for (auto& v : stage.cam.excite_conv.bias.data()) v = -1e4f;
  const auto t = stage.trace(random_tensor<float>(Shape{1, 10, 2, 3}, rng), random_tensor<float>(Shape{1, 6, 4, 6}, rng));
  for (float v : t.channel_gate.data()) EXPECT_EQ(v, 0.0f);
  for (float v : t.x_a.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(oracle::max_abs_diff(t.fused, oracle::of(t.x_b)), 0.0);
}

TEST(ApfStage, ChannelGateScalesEachPlaneUniformly) {
  std::mt19937_64 rng(8);
  ApfStage<double> stage(small_spec(), rng);
  testing::randomize_module(stage, rng, 0.4);
  stage.eval();
  const auto t = stage.trace(random_tensor<double>(Shape{1, 10, 3, 3}, rng), random_tensor<double>(Shape{1, 6, 6, 6}, rng));
  const Shape s = t.x_a.shape();
  for (std::int64_t c = 0; c < s.c; ++c) {
    double lo = 1e300, hi = -1e300;
    for (std::int64_t h = 0; h < s.h; ++h)
      for (std::int64_t w = 0; w < s.w; ++w) {
        const double base = t.crb.at(0, c, h, w);
        if (std::abs(base) < 1e-9) continue;
        const double ratio = t.x_a.at(0, c, h, w) / base;
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
      }
    if (lo <= hi) EXPECT_LT(hi - lo, 1e-12) << "channel " << c;
  }
}

TEST(Pyramid, FourStagesWithStrides4To32) {
  ModelConfig cfg;
  cfg.num_classes = 19;
  S2Fpn<float> model(cfg);
  EXPECT_EQ(model.pyramid_strides(), (std::array<int, 4>{4, 8, 16, 32}));
  model.train();
  const auto out = model.forward(Tensor<float>::meta(Shape{1, 3, 512, 1024}));
  for (int k = 0; k < 4; ++k) {
    const std::int64_t stride = model.pyramid_strides()[static_cast<std::size_t>(k)];
    EXPECT_EQ(out.aux[static_cast<std::size_t>(k)].shape(), (Shape{1, 19, 512 / stride, 1024 / stride}));
  }
  const auto t = model.apf(2).trace(Tensor<float>::meta(Shape{1, cfg.widths[1], 64, 128}),
                                    Tensor<float>::meta(Shape{1, 64, 128, 256}));
  EXPECT_EQ(t.out.shape(), (Shape{1, cfg.widths[0], 128, 256}));
}

TEST(Pyramid, ModifiedBackboneDoublesPyramidResolution) {
  ModelConfig a;
  a.backbone.variant = BackboneVariant::kR34;
  ModelConfig b = a;
  b.backbone.variant = BackboneVariant::kR34M;
  S2Fpn<float> r34(a);
  S2Fpn<float> r34m(b);
  const auto oa = r34.forward(Tensor<float>::meta(Shape{1, 3, 256, 512}));
  const auto ob = r34m.forward(Tensor<float>::meta(Shape{1, 3, 256, 512}));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(ob.aux[k].shape().h, 2 * oa.aux[k].shape().h);
    EXPECT_EQ(ob.aux[k].shape().w, 2 * oa.aux[k].shape().w);
  }
  EXPECT_EQ(oa.main.shape(), ob.main.shape());
}

}  // namespace
}  // namespace s2fpn
