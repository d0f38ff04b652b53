#include "topicnet/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace topicnet::netpbm {

namespace {

std::string header(const char* magic, std::size_t w, std::size_t h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

std::string encode(const Tensor& t, std::size_t channels, const char* magic) {
  Shape s = t.shape();
  if (s.size() == 2 && channels == 1) s = {1, s[0], s[1]};
  if (s.size() != 3 || s[0] != channels)
    throw ShapeError(std::string("netpbm ") + magic + " expects [" + std::to_string(channels) + ",H,W], got " +
                     to_string(t.shape()));
  const std::size_t h = s[1], w = s[2], plane = h * w;
  std::string out = header(magic, w, h);
  out.reserve(out.size() + channels * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < channels; ++c) out.push_back(static_cast<char>(quantize(t[c * plane + i])));
  return out;
}

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& b) : b_(b) {}

  std::string magic() {
    if (b_.size() < 2) fail("truncated magic");
    pos_ = 2;
    return b_.substr(0, 2);
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1u << 24) fail(std::string(what) + " too large");
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what);
    return v;
  }

  // Exactly one whitespace byte separates the maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) fail("missing raster separator");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw FormatError("netpbm: " + why + " at byte offset " + std::to_string(pos_));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint8_t quantize(double x) {
  if (!std::isfinite(x)) throw NumericError("netpbm: non-finite pixel value");
  const double v = std::round(std::clamp(x, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(v);
}

std::string encode_ppm(const Tensor& image) { return encode(image, 3, "P6"); }
std::string encode_pgm(const Tensor& map) { return encode(map, 1, "P5"); }

Tensor decode(const std::string& bytes) {
  HeaderReader r(bytes);
  const std::string magic = r.magic();
  std::size_t channels = 0;
  if (magic == "P6") channels = 3;
  else if (magic == "P5") channels = 1;
  else throw FormatError("netpbm: unsupported magic '" + magic + "' at byte offset 0");
  const std::size_t w = r.number("width");
  const std::size_t h = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (w == 0 || h == 0) r.fail("zero image extent");
  if (maxval != 255) r.fail("maxval must be 255");
  const std::size_t start = r.raster_start();
  const std::size_t plane = w * h, need = plane * channels;
  if (bytes.size() < start + need)
    throw FormatError("netpbm: truncated raster, expected " + std::to_string(need) + " bytes at byte offset " +
                      std::to_string(start) + ", file ends at " + std::to_string(bytes.size()));
  if (bytes.size() > start + need)
    throw FormatError("netpbm: trailing data at byte offset " + std::to_string(start + need));
  Tensor t(Shape{channels, h, w});
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      t[c * plane + i] = dequantize(static_cast<std::uint8_t>(bytes[start + i * channels + c]));
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }
void write_pgm(const std::filesystem::path& path, const Tensor& map) { write_file(path, encode_pgm(map)); }

Tensor read(const std::filesystem::path& path) {
  try {
    return decode(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace topicnet::netpbm
