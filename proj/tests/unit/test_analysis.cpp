#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "s2fpn/analysis.hpp"
#include "s2fpn/app/gradcheck_suite.hpp"
#include "s2fpn/app/image_io.hpp"
#include "s2fpn/app/metrics.hpp"
#include "s2fpn/app/palette.hpp"
#include "s2fpn/backbone.hpp"
#include "s2fpn/decoder.hpp"
#include "synthetic.hpp"

namespace s2fpn {
namespace {

using app::ConfusionMatrix;
using app::GrayImage;
using app::RgbImage;

std::map<std::string, ReportRow> by_module(const AnalysisReport& r) {
  std::map<std::string, ReportRow> m;
  for (const auto& row : r.rows) m[row.module] = row;
  return m;
}

TEST(Report, GroupKeys) {
  EXPECT_EQ(report_group("apf.3.ssam.alpha"), "apf.3");
  EXPECT_EQ(report_group("backbone.layer1.0.conv1.weight"), "backbone");
  EXPECT_EQ(report_group("conv1.weight"), "conv1");
  EXPECT_EQ(report_group("gfu"), "gfu");
}

TEST(Report, ParamRowsAgreeWithSerializedState) {
  ModelConfig cfg;
  cfg.num_classes = 7;
  S2Fpn<float> model(cfg);
  const auto rows = count_params(model);
  const std::int64_t from_rows = std::accumulate(rows.begin(), rows.end(), std::int64_t{0},
                                                 [](std::int64_t s, const ReportRow& r) { return s + r.params; });
  EXPECT_EQ(from_rows, model.parameter_count());

  // The checkpoint holds parameters and buffers; drop the buffers.
  const Checkpoint ck = Checkpoint::deserialize(model.state().serialize());
  std::int64_t buffers = 0;
  for (const auto& b : model.named_buffers()) buffers += b.value.numel();
  EXPECT_EQ(ck.total_elements() - buffers, from_rows);
}

TEST(Report, CostIsLinearInBatch) {
  ModelConfig cfg;
  S2Fpn<float> model(cfg);
  const auto one = count_flops(model, Shape{1, 3, 128, 256});
  const auto two = count_flops(model, Shape{2, 3, 128, 256});
  const auto three = count_flops(model, Shape{3, 3, 128, 256});
  EXPECT_EQ(three.total_macs, 3 * one.total_macs);
  EXPECT_EQ(three.total_params, one.total_params);
  // Each SSAM forms 1 - alpha once per call, so FLOPs are affine in N with
  // an intercept of one op per attention block.
  EXPECT_EQ(three.total_flops - two.total_flops, two.total_flops - one.total_flops);
  EXPECT_EQ(3 * one.total_flops - three.total_flops, 2 * 4);
  EXPECT_GT(one.total_flops, 2 * one.total_macs);
}

TEST(Report, DenseStageOnlyChangesCostFromThatStageOn) {
  std::mt19937_64 rng(1);
  Backbone<float> r34(BackboneConfig{BackboneVariant::kR34}, rng);
  Backbone<float> r34m(BackboneConfig{BackboneVariant::kR34M}, rng);
  const auto a = by_module(count_flops(r34, Shape{1, 3, 256, 512}));
  const auto b = by_module(count_flops(r34m, Shape{1, 3, 256, 512}));
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, row] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_EQ(b.at(name).params, row.params) << name;
    if (name == "conv1" || name == "bn1") {
      EXPECT_EQ(b.at(name).macs, row.macs) << name;
    } else if (name.starts_with("layer")) {
      // Every layer after the dense pool runs on four times the area.
      EXPECT_EQ(b.at(name).macs, 4 * row.macs) << name;
      EXPECT_EQ(b.at(name).flops, 4 * row.flops) << name;
    }
  }
}

TEST(Report, TextAndCsvLayout) {
  std::mt19937_64 rng(2);
  Backbone<float> r18(BackboneConfig{BackboneVariant::kR18}, rng);
  const auto r = count_flops(r18, Shape{1, 3, 64, 64}, "r18");
  const std::string csv = r.csv();
  EXPECT_EQ(csv.rfind("module,params,flops,macs\n", 0), 0u) << csv;
  const std::string total = "total," + std::to_string(r.total_params) + "," + std::to_string(r.total_flops) + "," +
                            std::to_string(r.total_macs) + "\n";
  EXPECT_TRUE(csv.ends_with(total)) << csv;
  EXPECT_NE(r.text().find("r18"), std::string::npos);
}

TEST(Report, RejectsNonPositiveInput) {
  std::mt19937_64 rng(3);
  Backbone<float> r18(BackboneConfig{BackboneVariant::kR18}, rng);
  EXPECT_THROW(count_flops(r18, Shape{0, 3, 64, 64}), DimensionError);
}

TEST(Latency, NearestRankPercentiles) {
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 0.5), 3.0);
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 0.95), 5.0);
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 0.0), 1.0);
  LatencyStats s;
  s.samples_ms = {2.0, 4.0, 6.0};
  finalize_latency(s);
  EXPECT_DOUBLE_EQ(s.mean_ms, 4.0);
  EXPECT_DOUBLE_EQ(s.fps, 250.0);
}

TEST(Latency, SampleCountAndAreaOrdering) {
  std::mt19937_64 rng(4);
  Backbone<float> r18(BackboneConfig{BackboneVariant::kR18}, rng);
  const auto small = benchmark_latency(r18, Shape{1, 3, 32, 32}, 1, 4, 0);
  const auto large = benchmark_latency(r18, Shape{1, 3, 256, 256}, 1, 4, 0);
  EXPECT_EQ(small.samples_ms.size(), 4u);
  EXPECT_EQ(small.warmup, 1);
  EXPECT_GT(small.fps, large.fps);
  EXPECT_LE(small.p50_ms, small.p95_ms);
}

TEST(GradCheckSuite, EveryCaseIsAddressableByName) {
  const auto names = app::gradcheck_case_names();
  EXPECT_GE(names.size(), 15u);
  const auto r = app::run_gradcheck_suite("ops", 1);
  EXPECT_FALSE(r.empty());
  for (const auto& c : r) EXPECT_TRUE(c.result.passed()) << c.name << ": " << c.result.report();
  EXPECT_THROW(app::run_gradcheck_suite("nope", 1), UsageError);
}

TEST(ImageIo, PpmAndPgmRoundTripBitExactly) {
  std::mt19937_64 rng(5);
  RgbImage img(7, 9);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(uniform_index(rng, 256));
  GrayImage g(5, 3);
  for (auto& v : g.data) v = static_cast<std::uint8_t>(uniform_index(rng, 256));
  const std::string ppm = app::encode_ppm(img);
  EXPECT_EQ(ppm.rfind("P6\n9 7\n255\n", 0), 0u);
  EXPECT_EQ(app::decode_ppm(ppm), img);
  EXPECT_EQ(app::encode_ppm(app::decode_ppm(ppm)), ppm);
  EXPECT_EQ(app::decode_pgm(app::encode_pgm(g)), g);

  testing::TempDir dir("io");
  app::write_ppm(dir.path() / "a.ppm", img);
  app::write_pgm(dir.path() / "a.pgm", g);
  EXPECT_EQ(app::read_ppm(dir.path() / "a.ppm"), img);
  EXPECT_EQ(app::read_pgm(dir.path() / "a.pgm"), g);
}

TEST(ImageIo, HeaderCommentsAndErrors) {
  const std::string with_comment = std::string("P5\n# made by hand\n2 1\n255\n") + '\x07' + '\x09';
  const auto g = app::decode_pgm(with_comment);
  EXPECT_EQ(g.w, 2);
  EXPECT_EQ(g.data, (std::vector<std::uint8_t>{7, 9}));
  EXPECT_THROW(app::decode_pgm("P6\n1 1\n255\nabc"), IoError);
  EXPECT_THROW(app::decode_pgm("P5\n2 2\n255\nab"), IoError);
  EXPECT_THROW(app::decode_pgm("P5\n1 1\n65535\nab"), IoError);
  try {
    app::read_ppm("/nonexistent/dir/x.ppm");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.ppm"), std::string::npos);
  }
}

TEST(Metrics, HandComputedTwoClassCase) {
  ConfusionMatrix cm(2);
  cm.add(std::vector<std::int32_t>{0, 0, 1, 1}, std::vector<std::int32_t>{0, 1, 1, 1});
  EXPECT_EQ(*cm.iou(0), 1.0 / 2.0);
  EXPECT_EQ(*cm.iou(1), 2.0 / 3.0);
  EXPECT_EQ(cm.miou(), (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
  EXPECT_NEAR(cm.miou(), 7.0 / 12.0, 1e-15);
  EXPECT_EQ(cm.pixel_accuracy(), 0.75);
}

TEST(Metrics, PerfectAndDisjointPredictions) {
  ConfusionMatrix perfect(4);
  const std::vector<std::int32_t> gt{0, 1, 2, 3, 3, 255, 1};
  perfect.add(gt, gt);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(*perfect.iou(k), 1.0);
  EXPECT_EQ(perfect.miou(), 1.0);
  EXPECT_EQ(perfect.total(), 6);

  ConfusionMatrix disjoint(3);
  disjoint.add(std::vector<std::int32_t>{0, 1, 2}, std::vector<std::int32_t>{1, 2, 0});
  for (int k = 0; k < 3; ++k) EXPECT_EQ(*disjoint.iou(k), 0.0);
  EXPECT_EQ(disjoint.miou(), 0.0);
}

TEST(Metrics, AbsentClassesAreExcluded) {
  ConfusionMatrix cm(5);
  cm.add(std::vector<std::int32_t>{0, 0, 1}, std::vector<std::int32_t>{0, 0, 1});
  EXPECT_FALSE(cm.iou(4).has_value());
  EXPECT_EQ(cm.miou(), 1.0);
  EXPECT_THROW(cm.add(5, 0), ConfigError);
  EXPECT_THROW(cm.add(0, -1), ConfigError);
}

TEST(Metrics, AccumulationIsOrderIndependent) {
  std::mt19937_64 rng(6);
  std::vector<std::pair<GrayImage, GrayImage>> images;
  for (int i = 0; i < 6; ++i) {
    GrayImage gt(4, 5), pred(4, 5);
    for (auto& v : gt.data) v = static_cast<std::uint8_t>(uniform01(rng) < 0.1 ? 255 : uniform_index(rng, 3));
    for (auto& v : pred.data) v = static_cast<std::uint8_t>(uniform_index(rng, 3));
    images.emplace_back(gt, pred);
  }
  ConfusionMatrix a(3);
  for (const auto& [g, p] : images) a.add(g, p);
  std::shuffle(images.begin(), images.end(), rng);
  ConfusionMatrix b(3), left(3), right(3);
  for (std::size_t i = 0; i < images.size(); ++i) {
    b.add(images[i].first, images[i].second);
    (i % 2 ? left : right).add(images[i].first, images[i].second);
  }
  left.merge(right);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, left);
  EXPECT_EQ(a.miou(), left.miou());
}

TEST(Palette, ParseColorizeAndBlend) {
  const auto p = app::Palette::parse("# id name r g b\n0 road 128 64 128\n1 sidewalk 244 35 232\n");
  ASSERT_EQ(p.size(), 2);
  EXPECT_EQ(p[1].name, "sidewalk");
  GrayImage labels(1, 3);
  labels.data = {1, 0, 255};
  const auto c = p.colorize(labels);
  EXPECT_EQ(c.data, (std::vector<std::uint8_t>{244, 35, 232, 128, 64, 128, 0, 0, 0}));

  RgbImage img(1, 3);
  img.data.assign(9, 100);
  EXPECT_EQ(app::blend(img, c, 0.0), img);
  EXPECT_EQ(app::blend(img, c, 1.0), c);
  EXPECT_EQ(app::blend(img, c, 0.5).data[0], 172);

  EXPECT_THROW(app::Palette::parse("0 road 1 2\n"), ConfigError);
  EXPECT_THROW(app::Palette::parse("1 road 1 2 3\n"), ConfigError);
  const auto gen = app::Palette::generated(19);
  std::set<std::array<std::uint8_t, 3>> colours;
  for (std::int64_t k = 0; k < gen.size(); ++k) colours.insert(gen[k].rgb);
  EXPECT_EQ(colours.size(), 19u);
}

}  // namespace
}  // namespace s2fpn
