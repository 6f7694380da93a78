#include "s2fpn/app/dataset.hpp"

#include <cmath>
#include <sstream>

namespace s2fpn::app {

DatasetLayout::DatasetLayout(std::filesystem::path root) : root_(std::move(root)) {
  if (!std::filesystem::is_directory(root_)) throw IoError("dataset root '" + root_.string() + "' is not a directory");
}

std::filesystem::path DatasetLayout::image_path(const std::string& name) const {
  return root_ / "images" / (name + ".ppm");
}

std::filesystem::path DatasetLayout::label_path(const std::string& name) const {
  return root_ / "labels" / (name + ".pgm");
}

std::filesystem::path DatasetLayout::split_path(const std::string& split) const { return root_ / (split + ".txt"); }

bool DatasetLayout::has_split(const std::string& split) const {
  return !split.empty() && std::filesystem::is_regular_file(split_path(split));
}

std::vector<std::string> DatasetLayout::list(const std::string& split) const {
  std::istringstream in(read_file(split_path(split)));
  std::vector<std::string> names;
  for (std::string line; std::getline(in, line);) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(b, e - b + 1));
  }
  return names;
}

std::vector<LabeledImage> DatasetLayout::load(const std::string& split) const {
  std::vector<LabeledImage> out;
  for (const auto& name : list(split)) {
    const auto ip = image_path(name);
    const auto lp = label_path(name);
    if (!std::filesystem::is_regular_file(ip)) throw IoError("missing image '" + ip.string() + "'");
    if (!std::filesystem::is_regular_file(lp)) throw IoError("missing label '" + lp.string() + "'");
    LabeledImage s{name, read_ppm(ip), read_pgm(lp)};
    if (s.image.h != s.label.h || s.image.w != s.label.w) {
      throw IoError("'" + ip.string() + "' is " + std::to_string(s.image.w) + "x" + std::to_string(s.image.h) +
                    " but '" + lp.string() + "' is " + std::to_string(s.label.w) + "x" + std::to_string(s.label.h));
    }
    out.push_back(std::move(s));
  }
  return out;
}

ChannelStats compute_channel_stats(const std::vector<LabeledImage>& samples) {
  std::array<double, 3> sum{};
  std::array<double, 3> sq{};
  double count = 0.0;
  for (const auto& s : samples) {
    const auto& d = s.image.data;
    for (std::size_t i = 0; i < d.size(); i += 3) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = d[i + c] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(s.image.h * s.image.w);
  }
  ChannelStats stats;
  if (count == 0.0) return stats;
  for (std::size_t c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / count;
    const double var = std::max(sq[c] / count - stats.mean[c] * stats.mean[c], 0.0);
    stats.std[c] = std::max(std::sqrt(var), 1e-3);
  }
  return stats;
}

template <typename T>
Tensor<T> normalize_image(const RgbImage& img, const ChannelStats& stats) {
  const std::int64_t plane = img.h * img.w;
  std::vector<T> values(static_cast<std::size_t>(3 * plane));
  for (std::int64_t p = 0; p < plane; ++p) {
    for (std::int64_t c = 0; c < 3; ++c) {
      const double v = img.data[static_cast<std::size_t>(p * 3 + c)] / 255.0;
      values[static_cast<std::size_t>(c * plane + p)] =
          static_cast<T>((v - stats.mean[static_cast<std::size_t>(c)]) / stats.std[static_cast<std::size_t>(c)]);
    }
  }
  return Tensor<T>::from(Shape{1, 3, img.h, img.w}, std::move(values));
}

LabelMap to_label_map(const GrayImage& label) {
  LabelMap m(1, label.h, label.w);
  std::copy(label.data.begin(), label.data.end(), m.values.begin());
  return m;
}

GrayImage to_gray(const LabelMap& labels, std::int64_t index) {
  GrayImage g(labels.h, labels.w);
  const auto offset = index * labels.h * labels.w;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    g.data[i] = static_cast<std::uint8_t>(labels.values[static_cast<std::size_t>(offset) + i]);
  }
  return g;
}

SampleRecord to_sample(const LabeledImage& s, const ChannelStats& stats) {
  return SampleRecord{normalize_image<float>(s.image, stats), to_label_map(s.label)};
}

template Tensor<float> normalize_image<float>(const RgbImage&, const ChannelStats&);
template Tensor<double> normalize_image<double>(const RgbImage&, const ChannelStats&);

}  // namespace s2fpn::app
