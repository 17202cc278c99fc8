#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ikd {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(std::size_t r, std::size_t c, std::size_t ch = 0) {
    return data[(r * width + c) * channels + ch];
  }
  std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch = 0) const {
    return data[(r * width + c) * channels + ch];
  }
};

struct Image16 {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> data;
};

// Binary netpbm: P6 (RGB, maxval 255), P5 (gray, maxval 255 or 65535,
// 16-bit samples big-endian). Header comments are accepted on read.
// Malformed input raises FormatError with the byte offset.
void write_ppm(std::ostream& os, const Image8& image);
void write_pgm(std::ostream& os, const Image8& image);
void write_pgm16(std::ostream& os, const Image16& image);
Image8 read_ppm(std::istream& is);
Image8 read_pgm(std::istream& is);
Image16 read_pgm16(std::istream& is);

void save_ppm(const std::string& path, const Image8& image);
void save_pgm(const std::string& path, const Image8& image);
void save_pgm16(const std::string& path, const Image16& image);
Image8 load_ppm(const std::string& path);
Image8 load_pgm(const std::string& path);
Image16 load_pgm16(const std::string& path);

}  // namespace ikd
