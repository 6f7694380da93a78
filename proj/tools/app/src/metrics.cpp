#include "s2fpn/app/metrics.hpp"

#include <numeric>

#include "s2fpn/error.hpp"

namespace s2fpn::app {

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes, std::int32_t ignore_index)
    : k_(num_classes), ignore_(ignore_index), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

void ConfusionMatrix::add(std::int32_t gt, std::int32_t pred) {
  if (gt == ignore_) return;
  if (gt < 0 || gt >= k_) {
    throw ConfigError("ground-truth id " + std::to_string(gt) + " is outside the " + std::to_string(k_) + " classes");
  }
  if (pred < 0 || pred >= k_) {
    throw ConfigError("predicted id " + std::to_string(pred) + " is outside the " + std::to_string(k_) + " classes");
  }
  ++counts_[static_cast<std::size_t>(gt * k_ + pred)];
}

void ConfusionMatrix::add(const std::vector<std::int32_t>& gt, const std::vector<std::int32_t>& pred) {
  if (gt.size() != pred.size()) throw DimensionError("confusion matrix: label and prediction sizes differ");
  for (std::size_t i = 0; i < gt.size(); ++i) add(gt[i], pred[i]);
}

void ConfusionMatrix::add(const GrayImage& gt, const GrayImage& pred) {
  if (gt.h != pred.h || gt.w != pred.w) throw DimensionError("confusion matrix: label and prediction dims differ");
  for (std::size_t i = 0; i < gt.data.size(); ++i) add(gt.data[i], pred.data[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ConfigError("cannot merge confusion matrices with different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::optional<double> ConfusionMatrix::iou(std::int64_t k) const {
  std::int64_t row = 0;
  std::int64_t col = 0;
  for (std::int64_t j = 0; j < k_; ++j) {
    row += count(k, j);
    col += count(j, k);
  }
  const std::int64_t tp = count(k, k);
  const std::int64_t uni = row + col - tp;
  if (uni == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(uni);
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int n = 0;
  for (std::int64_t k = 0; k < k_; ++k) {
    if (const auto v = iou(k)) {
      sum += *v;
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

double ConfusionMatrix::pixel_accuracy() const {
  std::int64_t diag = 0;
  for (std::int64_t k = 0; k < k_; ++k) diag += count(k, k);
  const std::int64_t t = total();
  return t > 0 ? static_cast<double>(diag) / static_cast<double>(t) : 0.0;
}

}  // namespace s2fpn::app
