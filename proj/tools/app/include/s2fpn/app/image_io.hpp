#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace s2fpn::app {

/// 8-bit interleaved RGB image.
struct RgbImage {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::uint8_t> data;  ///< h * w * 3, row-major

  RgbImage() = default;
  RgbImage(std::int64_t h_, std::int64_t w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_ * w_ * 3), 0) {}
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// 8-bit single-channel image (label maps use it with 255 = ignore).
struct GrayImage {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::uint8_t> data;  ///< h * w, row-major

  GrayImage() = default;
  GrayImage(std::int64_t h_, std::int64_t w_, std::uint8_t fill = 0)
      : h(h_), w(w_), data(static_cast<std::size_t>(h_ * w_), fill) {}
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Binary netpbm (P6 / P5) with maxval 255. Header comments are accepted on
// read; writes use the canonical "P6\n<w> <h>\n255\n" header.
RgbImage decode_ppm(std::string_view bytes, const std::string& origin = "ppm");
GrayImage decode_pgm(std::string_view bytes, const std::string& origin = "pgm");
std::string encode_ppm(const RgbImage& img);
std::string encode_pgm(const GrayImage& img);

RgbImage read_ppm(const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);

/// Whole file as bytes; IoError naming the path when unreadable.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace s2fpn::app
