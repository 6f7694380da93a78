#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "s2fpn/app/commands.hpp"
#include "s2fpn/app/gradcheck_suite.hpp"
#include "synthetic.hpp"

#ifndef S2FPN_DATA_DIR
#error "S2FPN_DATA_DIR must point at the data/ directory"
#endif

namespace s2fpn {
namespace {

namespace fs = std::filesystem;
using namespace app;

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("cli");
    const fs::path root = dir_->path();
    corpus_ = testing::synthetic_corpus(3, 64, 64, 3, 21);
    testing::write_corpus(root / "data", corpus_, {"train", "val"});
    write_file(root / "data" / "single.txt", corpus_[0].name + "\n");

    std::ofstream cfg(root / "run.cfg");
    cfg << "dataset = " << (root / "data").string() << "\n"
        << "output_dir = " << (root / "run").string() << "\n"
        << "num_classes = 3\n"
        << "pyramid_width = 16\n"
        << "crop = 64x64\n"
        << "augment.scales = 1.0\n"
        << "batch_size = 2\n"
        << "max_iter = 3\n"
        << "seed = 4\n";
    cfg.close();

    GlobalOptions g;
    g.config = root / "run.cfg";
    std::ostringstream log;
    train_exit_ = cmd_train(g, log);
    train_log_ = log.str();
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path root() { return dir_->path(); }

  static inline testing::TempDir* dir_ = nullptr;
  static inline std::vector<LabeledImage> corpus_;
  static inline int train_exit_ = -1;
  static inline std::string train_log_;
};

TEST_F(CliPipeline, TrainWritesLogAndCheckpoints) {
  EXPECT_EQ(train_exit_, kExitOk);
  EXPECT_NE(train_log_.find("iter 2 lr "), std::string::npos) << train_log_;
  for (const char* f : {"last.ckpt", "best.ckpt", "train.log"}) EXPECT_TRUE(fs::exists(root() / "run" / f)) << f;
  const std::string bytes = read_file(root() / "run" / "best.ckpt");
  EXPECT_EQ(bytes.substr(0, 10), "S2FPNCKPT1");
}

TEST_F(CliPipeline, InferThenEvalAgreeOnConfusionCounts) {
  InferOptions io;
  io.checkpoint = root() / "run" / "best.ckpt";
  io.image = root() / "data" / "images" / (corpus_[0].name + ".ppm");
  io.out = root() / "overlay.ppm";
  std::ostringstream sink;
  ASSERT_EQ(cmd_infer(GlobalOptions{}, io, sink), kExitOk);
  const GrayImage labels = read_pgm(root() / "overlay_labels.pgm");
  for (auto v : labels.data) EXPECT_LT(v, 3);
  const RgbImage overlay = read_ppm(io.out);
  EXPECT_EQ(overlay.h, 64);

  ConfusionMatrix from_infer(3);
  from_infer.add(corpus_[0].label, labels);

  EvalOptions eo;
  eo.checkpoint = io.checkpoint;
  eo.dataset = root() / "data";
  eo.split = "single";
  eo.confusion = root() / "confusion.csv";
  eo.csv = root() / "iou.csv";
  ASSERT_EQ(cmd_eval(GlobalOptions{}, eo, sink), kExitOk);
  EXPECT_EQ(read_file(eo.confusion), confusion_csv(from_infer));
  const std::string iou = read_file(eo.csv);
  EXPECT_EQ(iou.rfind("class,name,iou\n", 0), 0u) << iou;
  EXPECT_NE(iou.find("\nmiou,,"), std::string::npos) << iou;
}

TEST_F(CliPipeline, InferIsDeterministic) {
  std::ostringstream sink;
  std::string first;
  for (int run = 0; run < 2; ++run) {
    InferOptions io;
    io.checkpoint = root() / "run" / "best.ckpt";
    io.image = root() / "data" / "images" / (corpus_[1].name + ".ppm");
    io.out = root() / ("det" + std::to_string(run) + ".ppm");
    ASSERT_EQ(cmd_infer(GlobalOptions{}, io, sink), kExitOk);
    const std::string bytes = read_file(io.out) + read_file(root() / ("det" + std::to_string(run) + "_labels.pgm"));
    if (run == 0) first = bytes;
    else EXPECT_EQ(bytes, first);
  }
}

TEST_F(CliPipeline, EvalRejectsPaletteOfWrongSize) {
  EvalOptions eo;
  eo.checkpoint = root() / "run" / "best.ckpt";
  eo.dataset = root() / "data";
  eo.palette = fs::path(S2FPN_DATA_DIR) / "cityscapes19.palette";
  std::ostringstream sink;
  EXPECT_THROW(cmd_eval(GlobalOptions{}, eo, sink), ConfigError);
}

TEST_F(CliPipeline, UnreadableImageIsIoError) {
  InferOptions io;
  io.checkpoint = root() / "run" / "best.ckpt";
  io.image = root() / "missing.ppm";
  io.out = root() / "x.ppm";
  std::ostringstream sink;
  EXPECT_THROW(cmd_infer(GlobalOptions{}, io, sink), IoError);
}

TEST(Cli, InvalidConfigKeyIsReportedByName) {
  testing::TempDir dir("badcfg");
  write_file(dir.path() / "bad.cfg", "num_classes = 3\nlearning_rate = 0.1\n");
  GlobalOptions g;
  g.config = dir.path() / "bad.cfg";
  std::ostringstream sink;
  try {
    cmd_train(g, sink);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cmd_train(GlobalOptions{}, sink), UsageError);
}

TEST(Cli, AnalyzeReportsAllBackbones) {
  AnalyzeOptions opts;
  opts.height = 128;
  opts.width = 256;
  opts.compare = true;
  std::ostringstream out;
  ASSERT_EQ(cmd_analyze(GlobalOptions{}, opts, out), kExitOk);
  const std::string text = out.str();
  for (const char* s : {"resnet18", "resnet34", "resnet34m", "cost ratio resnet34m / resnet34"})
    EXPECT_NE(text.find(s), std::string::npos) << s;
}

TEST(Cli, GradcheckSingleCase) {
  GradcheckOptions opts;
  opts.scope = gradcheck_case_names().front();
  opts.seeds = 1;
  std::ostringstream out;
  EXPECT_EQ(cmd_gradcheck(GlobalOptions{}, opts, out), kExitOk);
  opts.tolerance = 0.0;
  EXPECT_EQ(cmd_gradcheck(GlobalOptions{}, opts, out), kExitNumeric);
}

TEST(Cli, ShippedPalettesParse) {
  const auto city = Palette::load(fs::path(S2FPN_DATA_DIR) / "cityscapes19.palette");
  EXPECT_EQ(city.size(), 19);
  EXPECT_EQ(city[0].name, "road");
  EXPECT_EQ(Palette::load(fs::path(S2FPN_DATA_DIR) / "camvid11.palette").size(), 11);
}

}  // namespace
}  // namespace s2fpn
