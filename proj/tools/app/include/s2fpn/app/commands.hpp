#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>

#include "s2fpn/app/dataset.hpp"
#include "s2fpn/app/metrics.hpp"
#include "s2fpn/app/palette.hpp"
#include "s2fpn/decoder.hpp"
#include "s2fpn/training.hpp"

namespace s2fpn::app {

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

struct GlobalOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool f64 = false;
};

template <typename T>
struct LoadedModel {
  std::unique_ptr<S2Fpn<T>> model;
  ChannelStats stats;
};

/// Rebuilds the model described by a checkpoint's metadata and loads its weights.
template <typename T>
LoadedModel<T> load_model(const Checkpoint& ckpt);

/// Arg-max class map for one image. The image is padded (bottom/right) to a
/// size the backbone accepts and the logits are cropped back.
template <typename T>
GrayImage predict(S2Fpn<T>& model, const RgbImage& image, const ChannelStats& stats);

/// Confusion matrix of the model's predictions over a list of samples.
template <typename T>
ConfusionMatrix evaluate(S2Fpn<T>& model, const std::vector<LabeledImage>& samples, const ChannelStats& stats,
                         std::int32_t ignore_index = 255);

/// Per-class IoU table (aligned text) and CSV for a confusion matrix.
std::string iou_table(const ConfusionMatrix& cm, const Palette& palette);
std::string iou_csv(const ConfusionMatrix& cm, const Palette& palette);
std::string confusion_csv(const ConfusionMatrix& cm);

/// Trains as described by the run config; returns an exit code.
int cmd_train(const GlobalOptions& global, std::ostream& out);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;
  std::string split = "val";
  std::filesystem::path palette;    ///< optional class names
  std::filesystem::path csv;        ///< optional per-class IoU CSV
  std::filesystem::path confusion;  ///< optional K x K count CSV
};
int cmd_eval(const GlobalOptions& global, const EvalOptions& opts, std::ostream& out);

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
  std::filesystem::path out;     ///< colour overlay (PPM)
  std::filesystem::path labels;  ///< raw label map (PGM); default <out stem>_labels.pgm
  std::filesystem::path palette;
  double alpha = 0.5;  ///< 1: palette colours only, 0: the input image
};
int cmd_infer(const GlobalOptions& global, const InferOptions& opts, std::ostream& out);

struct AnalyzeOptions {
  std::string backbone;  ///< overrides the config's backbone when set
  std::int64_t batch = 1;
  std::int64_t height = 512;
  std::int64_t width = 1024;
  int latency_iters = 0;  ///< 0 skips the latency benchmark
  int warmup = 1;
  bool compare = false;  ///< also report all three backbones and the 34M / 34 ratio
  std::filesystem::path csv;
};
int cmd_analyze(const GlobalOptions& global, const AnalyzeOptions& opts, std::ostream& out);

struct GradcheckOptions {
  std::string scope = "all";
  int seeds = 5;
  double tolerance = 1e-4;
  double eps = 1e-6;
};
/// Returns kExitNumeric when any check exceeds the tolerance.
int cmd_gradcheck(const GlobalOptions& global, const GradcheckOptions& opts, std::ostream& out);

}  // namespace s2fpn::app
