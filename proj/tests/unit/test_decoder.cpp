#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "s2fpn/decoder.hpp"
#include "s2fpn/training.hpp"
#include "synthetic.hpp"

namespace s2fpn {
namespace {

using testing::random_tensor;

TEST(Gfu, MatchesScalarOracle) {
  for (bool literal : {false, true}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(seed);
      Gfu<float> gfu(6, 4, rng, literal);
      testing::randomize_module(gfu, rng, 0.5);
      gfu.eval();
      const auto xf = random_tensor<float>(Shape{2, 6, 2, 3}, rng);
      const auto xp = random_tensor<float>(Shape{2, 4, 8, 12}, rng);
      const auto y = gfu.forward(xf, xp);
      EXPECT_LT(oracle::max_abs_diff(y, oracle::gfu(oracle::of(xf), oracle::of(xp), gfu)), 1e-6)
          << (literal ? "literal" : "default");
    }
  }
}

TEST(Gfu, ContextIsSpatiallyUniform) {
  std::mt19937_64 rng(1);
  Gfu<double> gfu(5, 3, rng);
  testing::randomize_module(gfu, rng);
  gfu.eval();
  for (bool constant : {true, false}) {
    const auto xf = constant ? Tensor<double>::full(Shape{1, 5, 2, 2}, 0.8) : random_tensor<double>(Shape{1, 5, 2, 2}, rng);
    const auto t = gfu.trace(xf, random_tensor<double>(Shape{1, 3, 6, 6}, rng));
    ASSERT_EQ(t.context.shape(), (Shape{1, 3, 1, 1}));
    // The fusion adds one (n, c) scalar to every pixel of the apf branch.
    for (std::int64_t c = 0; c < 3; ++c) {
      const double ctx = t.context.at(0, c, 0, 0);
      for (std::int64_t h = 0; h < 6; ++h)
        for (std::int64_t w = 0; w < 6; ++w) EXPECT_EQ(t.fused.at(0, c, h, w), t.apf.at(0, c, h, w) + ctx);
    }
  }
}

TEST(Gfu, ZeroContextConvReducesToApfPath) {
  std::mt19937_64 rng(2);
  Gfu<float> gfu(5, 3, rng);
  testing::randomize_module(gfu, rng);
  gfu.eval();
  for (auto& v : gfu.ctx_conv.weight.data()) v = 0.0f;
  for (auto& v : gfu.ctx_conv.bias.data()) v = 0.0f;
  const auto xp = random_tensor<float>(Shape{1, 3, 4, 4}, rng);
  const auto y = gfu.forward(random_tensor<float>(Shape{1, 5, 1, 1}, rng), xp);
  const auto want = gfu.out_branch(gfu.apf_branch(xp));
  EXPECT_EQ(oracle::max_abs_diff(y, oracle::of(want)), 0.0);
}

TEST(Gfu, ChannelMismatchIsConfigError) {
  std::mt19937_64 rng(3);
  Gfu<float> gfu(5, 3, rng);
  EXPECT_THROW(gfu.forward(Tensor<float>::zeros(Shape{1, 4, 2, 2}), Tensor<float>::zeros(Shape{1, 3, 4, 4})),
               ConfigError);
}

TEST(Model, OutputShapesForToyInput) {
  ModelConfig cfg;
  cfg.num_classes = 5;
  S2Fpn<float> model(cfg);
  model.train();
  std::mt19937_64 rng(4);
  const auto out = model.forward(random_tensor<float>(Shape{1, 3, 64, 128}, rng));
  EXPECT_EQ(out.main.shape(), (Shape{1, 5, 64, 128}));
  const std::array<Shape, 4> want{Shape{1, 5, 16, 32}, Shape{1, 5, 8, 16}, Shape{1, 5, 4, 8}, Shape{1, 5, 2, 4}};
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out.aux[k].shape(), want[k]);

  model.eval();
  const auto eval_out = model.forward(Tensor<float>::meta(Shape{1, 3, 64, 128}));
  for (const auto& a : eval_out.aux) EXPECT_FALSE(a.defined());
}

TEST(Model, EvalForwardIsBitIdentical) {
  ModelConfig cfg;
  cfg.num_classes = 4;
  S2Fpn<float> model(cfg);
  model.eval();
  std::mt19937_64 rng(5);
  const auto x = random_tensor<float>(Shape{1, 3, 64, 128}, rng);
  const auto a = model.forward(x).main;
  const auto b = model.forward(x).main;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Model, ErrorsNameTheFailingModule) {
  ModelConfig cfg;
  S2Fpn<float> model(cfg);
  try {
    model.forward(Tensor<float>::meta(Shape{1, 3, 48, 50}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone"), std::string::npos) << e.what();
  }
}

TEST(Model, CheckpointNamesFollowModulePaths) {
  ModelConfig cfg;
  S2Fpn<float> model(cfg);
  const Checkpoint ck = model.state();
  for (const char* name : {"backbone.layer1.0.conv1.weight", "cfgb.depthwise.weight", "fab.pointwise.conv.weight",
                           "apf.2.lateral.conv.weight", "apf.5.ssam.shared_conv.weight", "apf.3.ssam.alpha",
                           "apf.4.cam.squeeze_conv.weight", "apf.2.frb.conv1.bn.running_mean",
                           "apf.2.head.classifier.weight", "apf.2.next_refine.conv.weight",
                           "apf.5.coarse_proj.conv.weight", "gfu.ctx_conv.weight", "head.classifier.weight"}) {
    EXPECT_NE(ck.find(name), nullptr) << name;
  }
}

TEST(Model, EveryParameterReceivesGradient) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.head_dropout = 0.0;
  S2Fpn<float> model(cfg);
  // A nonzero alpha opens the strip-attention path to the shared convolution.
  for (int level = 2; level <= 5; ++level) model.apf(level).ssam.alpha.data()[0] = 0.5f;
  model.train();
  std::mt19937_64 rng(6);
  const auto x = random_tensor<float>(Shape{2, 3, 64, 64}, rng);
  LabelMap labels(2, 64, 64);
  for (auto& v : labels.values) v = static_cast<std::int32_t>(uniform_index(rng, 3));
  LossConfig loss;
  loss.ohem.min_kept = 64 * 64;
  const auto out = model.forward(x);
  backward(total_loss(out.main, out.aux, labels, loss).total);
  for (const auto& p : model.named_parameters()) {
    const auto g = p.value.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; })) << p.name;
  }
}

TEST(Model, TrainAndEvalAgreeWhenRunningStatsAreBatchStats) {
  ModelConfig cfg;
  cfg.num_classes = 4;
  S2Fpn<double> model(cfg);
  for (auto* m : model.modules()) {
    if (auto* bn = dynamic_cast<BatchNorm2d<double>*>(m)) {
      bn->momentum = 1.0;
      bn->unbiased_running_var = false;
    }
  }
  std::mt19937_64 rng(7);
  const auto x = random_tensor<double>(Shape{1, 3, 64, 64}, rng);
  model.train();
  const auto train_logits = model.forward(x).main;
  model.eval();
  const auto eval_logits = model.forward(x).main;
  double scale = 0.0;
  for (double v : train_logits.data()) scale = std::max(scale, std::abs(v));
  EXPECT_LT(oracle::max_abs_diff(eval_logits, oracle::of(train_logits)), 1e-5 * std::max(1.0, scale));
}

}  // namespace
}  // namespace s2fpn
