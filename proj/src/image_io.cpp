#include "ikd/image_io.hpp"

#include <fstream>

#include "ikd/binary_io.hpp"

namespace ikd {

namespace {

struct Header {
  std::size_t width = 0, height = 0, maxval = 0;
};

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderParser {
 public:
  HeaderParser(bin::Reader& r, std::string what) : r_(r), what_(std::move(what)) {}

  void magic(const char* expected) {
    const auto at = r_.offset();
    char m[2];
    r_.bytes(m, 2);
    if (m[0] != expected[0] || m[1] != expected[1])
      throw FormatError(what_ + ": expected magic '" + expected + "' at byte offset " +
                        std::to_string(at));
  }

  std::size_t number() {
    std::uint8_t c = r_.u8();
    for (;;) {
      if (c == '#') {
        while (c != '\n' && c != '\r') c = r_.u8();
      } else if (!is_space(c)) {
        break;
      }
      c = r_.u8();
    }
    if (c < '0' || c > '9')
      throw FormatError(what_ + ": expected a decimal number at byte offset " +
                        std::to_string(r_.offset() - 1));
    std::size_t v = 0;
    while (c >= '0' && c <= '9') {
      v = v * 10 + (c - '0');
      if (v > (std::size_t{1} << 32))
        throw FormatError(what_ + ": header value too large at byte offset " +
                          std::to_string(r_.offset() - 1));
      c = r_.u8();
    }
    if (!is_space(c))
      throw FormatError(what_ + ": expected whitespace at byte offset " +
                        std::to_string(r_.offset() - 1));
    return v;
  }

 private:
  bin::Reader& r_;
  std::string what_;
};

Header read_header(bin::Reader& r, const char* magic, const std::string& what) {
  HeaderParser p(r, what);
  p.magic(magic);
  Header h;
  h.width = p.number();
  h.height = p.number();
  h.maxval = p.number();
  if (h.width == 0 || h.height == 0)
    throw FormatError(what + ": zero image dimension " + std::to_string(h.width) + "x" +
                      std::to_string(h.height));
  return h;
}

Image8 read8(std::istream& is, const char* magic, std::size_t channels, const std::string& what) {
  bin::Reader r(is, what);
  const auto h = read_header(r, magic, what);
  if (h.maxval != 255)
    throw FormatError(what + ": only maxval 255 is supported, got " + std::to_string(h.maxval));
  Image8 img{h.height, h.width, channels, {}};
  img.data.resize(h.height * h.width * channels);
  r.bytes(img.data.data(), img.data.size());
  return img;
}

void write8(std::ostream& os, const Image8& img, const char* magic, std::size_t channels,
            const char* what) {
  if (img.channels != channels || img.data.size() != img.height * img.width * channels ||
      img.height == 0 || img.width == 0)
    throw FormatError(std::string(what) + ": image buffer does not match " +
                      std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                      std::to_string(channels));
  os << magic << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size()));
}

template <typename F>
void to_file(const std::string& path, F&& write) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write(os);
  if (!os) throw FormatError("write to '" + path + "' failed");
}

template <typename F>
auto from_file(const std::string& path, F&& read) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  try {
    return read(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace

void write_ppm(std::ostream& os, const Image8& image) { write8(os, image, "P6", 3, "ppm"); }
void write_pgm(std::ostream& os, const Image8& image) { write8(os, image, "P5", 1, "pgm"); }

void write_pgm16(std::ostream& os, const Image16& img) {
  if (img.data.size() != img.height * img.width || img.height == 0 || img.width == 0)
    throw FormatError("pgm16: image buffer does not match " + std::to_string(img.height) + "x" +
                      std::to_string(img.width));
  os << "P5\n" << img.width << ' ' << img.height << "\n65535\n";
  for (auto v : img.data) {
    os.put(static_cast<char>(v >> 8));
    os.put(static_cast<char>(v & 0xff));
  }
}

Image8 read_ppm(std::istream& is) { return read8(is, "P6", 3, "ppm"); }
Image8 read_pgm(std::istream& is) { return read8(is, "P5", 1, "pgm"); }

Image16 read_pgm16(std::istream& is) {
  bin::Reader r(is, "pgm16");
  const auto h = read_header(r, "P5", "pgm16");
  if (h.maxval < 256 || h.maxval > 65535)
    throw FormatError("pgm16: expected a 16-bit maxval, got " + std::to_string(h.maxval));
  Image16 img{h.height, h.width, {}};
  std::vector<std::uint8_t> raw(2 * h.height * h.width);
  r.bytes(raw.data(), raw.size());
  img.data.resize(h.height * h.width);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  return img;
}

void save_ppm(const std::string& path, const Image8& image) {
  to_file(path, [&](std::ostream& os) { write_ppm(os, image); });
}
void save_pgm(const std::string& path, const Image8& image) {
  to_file(path, [&](std::ostream& os) { write_pgm(os, image); });
}
void save_pgm16(const std::string& path, const Image16& image) {
  to_file(path, [&](std::ostream& os) { write_pgm16(os, image); });
}
Image8 load_ppm(const std::string& path) { return from_file(path, read_ppm); }
Image8 load_pgm(const std::string& path) { return from_file(path, read_pgm); }
Image16 load_pgm16(const std::string& path) { return from_file(path, read_pgm16); }

}  // namespace ikd
