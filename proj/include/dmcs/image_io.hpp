#pragma once

// PNG reading and writing through libpng's classic API. Samples are passed
// through unchanged (no gamma handling) so 16-bit instance ids survive a round trip.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dmcs/core.hpp"
#include "dmcs/errors.hpp"

namespace dmcs::io {

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1 gray, 2 gray+alpha, 3 rgb, 4 rgba
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels

  std::uint16_t at(int y, int x, int c) const {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_handler(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

inline PngImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open '" + path + "'");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_handler,
                                           detail::png_warning_handler);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  PngImage img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("reading '" + path + "': " + err);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = raw.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      img.samples[i] = static_cast<std::uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = raw[i];
  }
  return img;
}

inline void write_png(const std::string& path, const PngImage& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write '" + path + "'");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_handler,
                                            detail::png_warning_handler);
  if (!png) throw DataError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  const int bytes = img.bit_depth == 16 ? 2 : 1;
  const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
  std::vector<std::uint8_t> raw(rowbytes * img.height);
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (bytes == 2) {
      raw[2 * i] = static_cast<std::uint8_t>(img.samples[i] >> 8);  // PNG is big-endian
      raw[2 * i + 1] = static_cast<std::uint8_t>(img.samples[i] & 0xff);
    } else {
      raw[i] = static_cast<std::uint8_t>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = raw.data() + rowbytes * y;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("writing '" + path + "': " + err);
  }
  int color = PNG_COLOR_TYPE_GRAY;
  if (img.channels == 2) color = PNG_COLOR_TYPE_GRAY_ALPHA;
  if (img.channels == 3) color = PNG_COLOR_TYPE_RGB;
  if (img.channels == 4) color = PNG_COLOR_TYPE_RGB_ALPHA;
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header so identical pixels give identical bytes.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---- typed helpers ---------------------------------------------------------

inline ImageTensor to_image(const PngImage& png) {
  const int c = png.channels >= 3 ? 3 : 1;
  ImageTensor out(c, png.height, png.width);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x)
      for (int k = 0; k < c; ++k) out(k, y, x) = static_cast<float>(png.at(y, x, k));
  return out;
}

inline ImageTensor read_image(const std::string& path) { return to_image(read_png(path)); }

/// Writes an RGB or gray image, rounding and clamping to 8 bits.
inline void write_image(const std::string& path, const ImageTensor& img) {
  PngImage png{img.width(), img.height(), img.channels() >= 3 ? 3 : 1, 8, {}};
  png.samples.resize(static_cast<std::size_t>(png.width) * png.height * png.channels);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int k = 0; k < png.channels; ++k) {
        const float v = std::round(img(k, y, x));
        png.samples[(static_cast<std::size_t>(y) * png.width + x) * png.channels + k] =
            static_cast<std::uint16_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
      }
  write_png(path, png);
}

/// Annotation images store the instance id as the pixel value (first channel).
inline InstanceMap read_instances(const std::string& path) {
  const PngImage png = read_png(path);
  InstanceMap out(png.height, png.width);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) out(y, x) = png.at(y, x, 0);
  return out;
}

inline void write_instances(const std::string& path, const InstanceMap& inst) {
  PngImage png{inst.width, inst.height, 1, 16, {inst.values.begin(), inst.values.end()}};
  write_png(path, png);
}

template <typename G>
void write_gray8(const std::string& path, const G& grid, int multiplier = 1) {
  PngImage png{grid.width, grid.height, 1, 8, {}};
  png.samples.reserve(grid.size());
  for (auto v : grid.values) png.samples.push_back(static_cast<std::uint16_t>(std::min(255, v * multiplier)));
  write_png(path, png);
}

inline LabelMap read_labels(const std::string& path, int num_classes = 1) {
  const PngImage png = read_png(path);
  LabelMap out(png.height, png.width, num_classes);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) out(y, x) = static_cast<std::uint8_t>(png.at(y, x, 0));
  validate_labels(out);
  return out;
}

inline void write_labels(const std::string& path, const LabelMap& labels) { write_gray8(path, labels); }

inline EdgeMap read_edges(const std::string& path) {
  const PngImage png = read_png(path);
  EdgeMap out(png.height, png.width);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) out(y, x) = png.at(y, x, 0) ? 1 : 0;
  return out;
}

inline void write_edges(const std::string& path, const EdgeMap& edges) { write_gray8(path, edges, 255); }

/// Probability channel rendered as 8-bit gray (0..1 -> 0..255).
template <typename T>
void write_probability(const std::string& path, const Tensor<T>& probs, int channel) {
  PngImage png{probs.width(), probs.height(), 1, 8, {}};
  png.samples.resize(probs.plane());
  for (std::size_t i = 0; i < probs.plane(); ++i) {
    const double v = std::round(255.0 * static_cast<double>(probs.channel(channel)[i]));
    png.samples[i] = static_cast<std::uint16_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
  }
  write_png(path, png);
}

/// Raw tensor dump: int32 channels, height, width, then float32 values, all little-endian.
template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  static_assert(sizeof(float) == 4);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  const std::int32_t dims[3] = {t.channels(), t.height(), t.width()};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  std::vector<float> f(t.values().begin(), t.values().end());
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  if (!out) throw DataError("failed writing " + path);
}

inline Tensor<float> read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::int32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (!in || dims[0] < 0 || dims[1] < 0 || dims[2] < 0) throw DataError("bad tensor header in " + path);
  Tensor<float> t(dims[0], dims[1], dims[2]);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
  if (in.gcount() != static_cast<std::streamsize>(t.size() * 4)) throw DataError("truncated tensor file " + path);
  return t;
}

}  // namespace dmcs::io
