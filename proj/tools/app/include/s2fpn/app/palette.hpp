#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "s2fpn/app/image_io.hpp"

namespace s2fpn::app {

struct PaletteEntry {
  std::string name;
  std::array<std::uint8_t, 3> rgb{};
};

/// Class id -> (name, colour). Ids are dense from 0.
class Palette {
 public:
  Palette() = default;
  explicit Palette(std::vector<PaletteEntry> entries) : entries_(std::move(entries)) {}

  /// Parses "id name r g b" lines; '#' starts a comment.
  static Palette parse(std::string_view text, const std::string& origin = "palette");
  static Palette load(const std::filesystem::path& path);
  /// Distinct generated colours named class_0 .. class_{k-1}.
  static Palette generated(std::int64_t k);

  std::int64_t size() const { return static_cast<std::int64_t>(entries_.size()); }
  const PaletteEntry& operator[](std::int64_t id) const { return entries_[static_cast<std::size_t>(id)]; }

  /// Colour-maps a label image; ids outside the palette (e.g. 255) map to black.
  RgbImage colorize(const GrayImage& labels) const;

 private:
  std::vector<PaletteEntry> entries_;
};

/// (1 - alpha) * image + alpha * colour, rounded to nearest.
RgbImage blend(const RgbImage& image, const RgbImage& colors, double alpha);

}  // namespace s2fpn::app
