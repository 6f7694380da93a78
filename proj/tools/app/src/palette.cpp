#include "s2fpn/app/palette.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "s2fpn/error.hpp"

namespace s2fpn::app {

Palette Palette::parse(std::string_view text, const std::string& origin) {
  std::map<int, PaletteEntry> by_id;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    int id = 0;
    PaletteEntry e;
    int r = 0, g = 0, b = 0;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string rest;
    if (!(fields >> id >> e.name >> r >> g >> b) || (fields >> rest)) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'id name r g b'");
    }
    if (id < 0 || std::min({r, g, b}) < 0 || std::max({r, g, b}) > 255) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": id or colour out of range");
    }
    e.rgb = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    if (!by_id.emplace(id, e).second) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate id " + std::to_string(id));
    }
  }
  std::vector<PaletteEntry> entries;
  for (const auto& [id, e] : by_id) {
    if (id != static_cast<int>(entries.size())) {
      throw ConfigError(origin + ": class ids must be dense from 0 (missing id " + std::to_string(entries.size()) + ")");
    }
    entries.push_back(e);
  }
  return Palette(std::move(entries));
}

Palette Palette::load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

Palette Palette::generated(std::int64_t k) {
  std::vector<PaletteEntry> entries;
  for (std::int64_t i = 0; i < k; ++i) {
    // golden-angle hue walk at fixed saturation / value
    const double hue = std::fmod(static_cast<double>(i) * 137.508, 360.0) / 60.0;
    const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
    std::array<double, 3> rgb{};
    switch (static_cast<int>(hue)) {
      case 0: rgb = {1, x, 0}; break;
      case 1: rgb = {x, 1, 0}; break;
      case 2: rgb = {0, 1, x}; break;
      case 3: rgb = {0, x, 1}; break;
      case 4: rgb = {x, 0, 1}; break;
      default: rgb = {1, 0, x}; break;
    }
    PaletteEntry e;
    e.name = "class_" + std::to_string(i);
    for (std::size_t c = 0; c < 3; ++c) e.rgb[c] = static_cast<std::uint8_t>(std::lround(40 + 200 * rgb[c]));
    entries.push_back(e);
  }
  return Palette(std::move(entries));
}

RgbImage Palette::colorize(const GrayImage& labels) const {
  RgbImage out(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const auto id = labels.data[i];
    if (id >= entries_.size()) continue;
    std::copy(entries_[id].rgb.begin(), entries_[id].rgb.end(), out.data.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return out;
}

RgbImage blend(const RgbImage& image, const RgbImage& colors, double alpha) {
  if (image.h != colors.h || image.w != colors.w) throw DimensionError("blend: image sizes differ");
  RgbImage out(image.h, image.w);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = (1.0 - alpha) * image.data[i] + alpha * colors.data[i];
    out.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return out;
}

}  // namespace s2fpn::app
