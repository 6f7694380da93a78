#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "s2fpn/app/image_io.hpp"
#include "s2fpn/training.hpp"

namespace s2fpn::app {

struct LabeledImage {
  std::string name;
  RgbImage image;
  GrayImage label;
};

/// Dataset root with images/<name>.ppm, labels/<name>.pgm and one
/// "<split>.txt" list of basenames per split.
class DatasetLayout {
 public:
  explicit DatasetLayout(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path image_path(const std::string& name) const;
  std::filesystem::path label_path(const std::string& name) const;
  std::filesystem::path split_path(const std::string& split) const;
  bool has_split(const std::string& split) const;

  /// Basenames listed in <split>.txt (blank lines and '#' comments skipped).
  std::vector<std::string> list(const std::string& split) const;
  /// Loads every listed pair; throws IoError naming the offending path when a
  /// file is missing or the image and label dims differ.
  std::vector<LabeledImage> load(const std::string& split) const;

 private:
  std::filesystem::path root_;
};

/// Per-channel mean / std of the RGB values scaled to [0, 1].
ChannelStats compute_channel_stats(const std::vector<LabeledImage>& samples);

/// (1, 3, H, W) tensor of (v / 255 - mean) / std.
template <typename T>
Tensor<T> normalize_image(const RgbImage& img, const ChannelStats& stats);

LabelMap to_label_map(const GrayImage& label);
GrayImage to_gray(const LabelMap& labels, std::int64_t index = 0);

SampleRecord to_sample(const LabeledImage& s, const ChannelStats& stats);

}  // namespace s2fpn::app
