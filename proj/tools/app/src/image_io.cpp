#include "s2fpn/app/image_io.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "s2fpn/error.hpp"

namespace s2fpn::app {

namespace {

struct Header {
  std::int64_t w = 0;
  std::int64_t h = 0;
  std::size_t data_offset = 0;
};

// Reads the magic, width, height and maxval tokens; '#' comments run to the
// end of the line. Exactly one whitespace byte separates maxval from the data.
Header parse_header(std::string_view bytes, std::string_view magic, const std::string& origin) {
  if (bytes.substr(0, 2) != magic) {
    throw IoError(origin + ": expected a binary netpbm file starting with '" + std::string(magic) + "'");
  }
  std::size_t pos = 2;
  auto next_number = [&](const char* what) {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw IoError(origin + ": malformed header (" + what + ")");
    }
    std::int64_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1LL << 31)) throw IoError(origin + ": header value too large (" + what + ")");
      ++pos;
    }
    return v;
  };
  Header h;
  h.w = next_number("width");
  h.h = next_number("height");
  const std::int64_t maxval = next_number("maxval");
  if (h.w < 1 || h.h < 1) throw IoError(origin + ": image dimensions must be positive");
  if (maxval != 255) throw IoError(origin + ": only 8-bit files (maxval 255) are supported, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw IoError(origin + ": missing whitespace before pixel data");
  }
  h.data_offset = pos + 1;
  return h;
}

}  // namespace

RgbImage decode_ppm(std::string_view bytes, const std::string& origin) {
  const Header hd = parse_header(bytes, "P6", origin);
  RgbImage img(hd.h, hd.w);
  if (bytes.size() - hd.data_offset < img.data.size()) throw IoError(origin + ": truncated pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(hd.data_offset), img.data.size(), img.data.begin());
  return img;
}

GrayImage decode_pgm(std::string_view bytes, const std::string& origin) {
  const Header hd = parse_header(bytes, "P5", origin);
  GrayImage img(hd.h, hd.w);
  if (bytes.size() - hd.data_offset < img.data.size()) throw IoError(origin + ": truncated pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(hd.data_offset), img.data.size(), img.data.begin());
  return img;
}

std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  out.append(img.data.begin(), img.data.end());
  return out;
}

std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  out.append(img.data.begin(), img.data.end());
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path), path.string()); }
void write_ppm(const std::filesystem::path& path, const RgbImage& img) { write_file(path, encode_ppm(img)); }
void write_pgm(const std::filesystem::path& path, const GrayImage& img) { write_file(path, encode_pgm(img)); }

}  // namespace s2fpn::app
