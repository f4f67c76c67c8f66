#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "iukan/tensor.hpp"

namespace iukan {

/// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t H, std::size_t W, std::size_t C) : height(H), width(W), channels(C), pixels(H * W * C, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  friend bool operator==(const Image8&, const Image8&) = default;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

inline Image8 read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG " + path + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(img.height, img.width, color ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path + ": " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& im) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path + ": " + img.message);
}

inline std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t le16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

/// Uncompressed 8-bit paletted, 24-bit or 32-bit BMP.
inline Image8 read_bmp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw IoError("not a BMP file: " + path);
  const std::uint32_t offset = le32(&b[10]);
  const std::uint32_t hdr = le32(&b[14]);
  const auto w = static_cast<std::int32_t>(le32(&b[18]));
  const auto h_raw = static_cast<std::int32_t>(le32(&b[22]));
  const std::uint16_t bpp = le16(&b[28]);
  const std::uint32_t compression = le32(&b[30]);
  if (compression != 0 && !(compression == 3 && bpp == 32)) throw IoError("compressed BMP not supported: " + path);
  if (bpp != 8 && bpp != 24 && bpp != 32) throw IoError("unsupported BMP depth " + std::to_string(bpp) + ": " + path);
  if (w <= 0 || h_raw == 0) throw IoError("bad BMP dimensions: " + path);
  const bool top_down = h_raw < 0;
  const std::size_t W = static_cast<std::size_t>(w);
  const std::size_t H = static_cast<std::size_t>(top_down ? -h_raw : h_raw);
  const std::size_t stride = ((W * bpp + 31) / 32) * 4;
  if (offset + stride * H > b.size()) throw IoError("truncated BMP: " + path);

  std::vector<std::uint8_t> palette;
  bool gray_palette = true;
  if (bpp == 8) {
    std::uint32_t ncolors = le32(&b[46]);
    if (ncolors == 0) ncolors = 256;
    const std::size_t pal = 14 + hdr;
    if (pal + 4 * ncolors > offset) throw IoError("bad BMP palette: " + path);
    palette.resize(3 * 256, 0);
    for (std::uint32_t i = 0; i < ncolors && i < 256; ++i) {
      palette[3 * i + 0] = b[pal + 4 * i + 2];
      palette[3 * i + 1] = b[pal + 4 * i + 1];
      palette[3 * i + 2] = b[pal + 4 * i + 0];
      gray_palette = gray_palette && palette[3 * i] == palette[3 * i + 1] && palette[3 * i] == palette[3 * i + 2];
    }
  }
  const std::size_t C = (bpp == 8 && gray_palette) ? 1 : 3;
  Image8 out(H, W, C);
  for (std::size_t y = 0; y < H; ++y) {
    const unsigned char* row = &b[offset + stride * (top_down ? y : H - 1 - y)];
    for (std::size_t x = 0; x < W; ++x) {
      if (bpp == 8) {
        const std::size_t idx = row[x];
        for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = palette[3 * idx + c];
      } else {
        const unsigned char* px = row + x * (bpp / 8);
        out.at(y, x, 0) = px[2];
        out.at(y, x, 1) = px[1];
        out.at(y, x, 2) = px[0];
      }
    }
  }
  return out;
}

inline void write_bmp(const std::string& path, const Image8& im) {
  const std::uint16_t bpp = im.channels == 3 ? 24 : 8;
  const std::size_t stride = ((im.width * bpp + 31) / 32) * 4;
  const std::uint32_t pal = bpp == 8 ? 256 * 4 : 0;
  const std::uint32_t offset = 54 + pal;
  std::vector<unsigned char> b;
  b.reserve(offset + stride * im.height);
  b.push_back('B');
  b.push_back('M');
  put32(b, static_cast<std::uint32_t>(offset + stride * im.height));
  put32(b, 0);
  put32(b, offset);
  put32(b, 40);
  put32(b, static_cast<std::uint32_t>(im.width));
  put32(b, static_cast<std::uint32_t>(im.height));
  put16(b, 1);
  put16(b, bpp);
  put32(b, 0);
  put32(b, static_cast<std::uint32_t>(stride * im.height));
  put32(b, 2835);
  put32(b, 2835);
  put32(b, bpp == 8 ? 256 : 0);
  put32(b, 0);
  for (std::uint32_t i = 0; bpp == 8 && i < 256; ++i) {
    for (int k = 0; k < 3; ++k) b.push_back(static_cast<unsigned char>(i));
    b.push_back(0);
  }
  for (std::size_t r = 0; r < im.height; ++r) {
    const std::size_t y = im.height - 1 - r;
    const std::size_t start = b.size();
    for (std::size_t x = 0; x < im.width; ++x) {
      if (bpp == 8) {
        b.push_back(im.at(y, x));
      } else {
        b.push_back(im.at(y, x, 2));
        b.push_back(im.at(y, x, 1));
        b.push_back(im.at(y, x, 0));
      }
    }
    b.resize(start + stride, 0);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace detail

/// PNG or BMP, chosen by extension.
inline Image8 read_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path);
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".bmp") return detail::read_bmp(path);
  throw IoError("unsupported image format '" + ext + "': " + path);
}

inline void write_image(const std::string& path, const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw IoError("can only write gray or RGB images");
  if (im.pixels.size() != im.height * im.width * im.channels) throw IoError("image buffer size mismatch");
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::write_png(path, im);
  if (ext == ".bmp") return detail::write_bmp(path, im);
  throw IoError("unsupported image format '" + ext + "': " + path);
}

}  // namespace iukan
