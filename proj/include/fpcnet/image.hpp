#pragma once

// 8-bit image files: PNG through libpng's simplified API, binary/ASCII PGM by hand.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fpcnet/error.hpp"
#include "fpcnet/io.hpp"
#include "fpcnet/tensor.hpp"

namespace fpcnet {

// Interleaved 8-bit pixels, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t col, std::size_t ch = 0) {
    return data[(r * width + col) * channels + ch];
  }
  std::uint8_t at(std::size_t r, std::size_t col, std::size_t ch = 0) const {
    return data[(r * width + col) * channels + ch];
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace image_detail {

inline bool is_png(const std::vector<char>& b) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

inline Image8 decode_png(const std::vector<char>& bytes, const std::string& what) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw FormatError("cannot decode PNG '" + what + "': " + img.message);
  const bool color = img.format & PNG_FORMAT_FLAG_COLOR;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(img.height, img.width, color ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode PNG '" + what + "': " + img.message);
  }
  return out;
}

// P5 (binary) or P2 (ASCII) with maxval <= 255.
inline Image8 decode_pgm(const std::vector<char>& b, const std::string& what) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& m) -> void { throw FormatError("PGM '" + what + "': " + m); };
  auto skip = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#')
        while (pos < b.size() && b[pos] != '\n') ++pos;
      else if (std::isspace(static_cast<unsigned char>(b[pos])))
        ++pos;
      else
        break;
    }
  };
  auto number = [&]() -> std::size_t {
    skip();
    if (pos >= b.size() || !std::isdigit(static_cast<unsigned char>(b[pos]))) fail("malformed header");
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) v = v * 10 + (b[pos++] - '0');
    return v;
  };
  const bool ascii = b[1] == '2';
  const std::size_t w = number(), h = number(), maxval = number();
  if (!w || !h) fail("zero extent");
  if (maxval == 0 || maxval > 255) fail("only 8-bit PGM is supported");
  Image8 out(h, w, 1);
  if (ascii) {
    for (auto& v : out.data) {
      const std::size_t x = number();
      if (x > maxval) fail("sample exceeds maxval");
      v = static_cast<std::uint8_t>(x * 255 / maxval);
    }
    return out;
  }
  ++pos;  // single whitespace after maxval
  if (b.size() < pos + w * h) fail("truncated pixel data");
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto x = static_cast<std::uint8_t>(b[pos + i]);
    out.data[i] = static_cast<std::uint8_t>(x * 255u / maxval);
  }
  return out;
}

}  // namespace image_detail

inline Image8 read_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string what = path.string();
  if (image_detail::is_png(bytes)) return image_detail::decode_png(bytes, what);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '2'))
    return image_detail::decode_pgm(bytes, what);
  throw FormatError("'" + what + "' is neither PNG nor 8-bit PGM");
}

inline std::vector<char> encode_png(const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw UsageError("encode_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, im.data.data(), 0, nullptr))
    throw FormatError(std::string("PNG encoding failed: ") + img.message);
  std::vector<char> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, im.data.data(), 0, nullptr))
    throw FormatError(std::string("PNG encoding failed: ") + img.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& im) {
  write_file_atomic(path, encode_png(im));
}

// [1,C,H,W] in [0,1], value v/255.
template <class T = float>
Tensor<T> image_to_tensor(const Image8& im) {
  Tensor<T> t(Shape{1, im.channels, im.height, im.width});
  const std::size_t hw = im.height * im.width;
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = static_cast<T>(im.data[i * im.channels + c]) / T(255);
  return t;
}

// Round half up: 0.5 -> 128.
template <class T>
std::uint8_t to_byte(T p) {
  const double v = std::floor(static_cast<double>(p) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

// Sample n of a [N,C,H,W] tensor in [0,1], C in {1,3}.
template <class T>
Image8 tensor_to_image(const Tensor<T>& t, std::size_t n = 0) {
  if (t.rank() != 4 || (t.dim(1) != 1 && t.dim(1) != 3) || n >= t.dim(0))
    throw ShapeError("tensor_to_image: expected [N,1|3,H,W], got " + t.shape().str());
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3), hw = h * w;
  Image8 im(h, w, c);
  const T* src = t.ptr() + n * c * hw;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) im.data[i * c + ch] = to_byte(src[ch * hw + i]);
  return im;
}

}  // namespace fpcnet
