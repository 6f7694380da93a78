#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s2fpn/app/image_io.hpp"

namespace s2fpn::app {

/// K x K pixel counts; rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes, std::int32_t ignore_index = 255);

  std::int64_t num_classes() const { return k_; }
  std::int32_t ignore_index() const { return ignore_; }
  std::int64_t count(std::int64_t gt, std::int64_t pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }
  const std::vector<std::int64_t>& counts() const { return counts_; }
  /// Number of scored (non-ignored) pixels.
  std::int64_t total() const;

  /// Adds one (ground truth, prediction) pair. Ignored ground truth is
  /// skipped; any other id outside [0, K) throws ConfigError.
  void add(std::int32_t gt, std::int32_t pred);
  void add(const std::vector<std::int32_t>& gt, const std::vector<std::int32_t>& pred);
  void add(const GrayImage& gt, const GrayImage& pred);
  void merge(const ConfusionMatrix& other);

  /// TP / (TP + FP + FN); empty when the class is absent from both sides.
  std::optional<double> iou(std::int64_t k) const;
  /// Mean IoU over classes that occur in the ground truth or the predictions.
  double miou() const;
  double pixel_accuracy() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::int64_t k_;
  std::int32_t ignore_;
  std::vector<std::int64_t> counts_;
};

}  // namespace s2fpn::app
