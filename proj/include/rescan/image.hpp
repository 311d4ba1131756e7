#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "rescan/errors.hpp"
#include "rescan/tensor.hpp"

namespace rescan {

/// Planar float image (channel-major, then rows).
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return values[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const {
    return values[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
  bool same_size(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool operator==(const Image&) const = default;
};

inline Image crop(const Image& img, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width) {
    throw ConfigError("crop window outside image");
  }
  Image out(img.channels, h, w);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

inline Image clamp01(Image img) {
  for (auto& v : img.values) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

/// Export convention: clamp to [0, 1], then 8-bit quantisation.
inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline float dequantize(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

/// Signed residual in [-1, 1] stored as round((r + 1) / 2 * 255).
inline std::uint8_t encode_residual(float r) { return quantize((r + 1.0f) * 0.5f); }
inline float decode_residual(std::uint8_t v) { return dequantize(v) * 2.0f - 1.0f; }

inline Image quantized(const Image& img) {
  Image out = img;
  for (auto& v : out.values) v = dequantize(quantize(v));
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  Tensor<T> t(Shape{1, img.channels, img.height, img.width});
  auto d = t.data();
  for (std::size_t i = 0; i < img.values.size(); ++i) d[i] = static_cast<T>(img.values[i]);
  return t;
}

/// Stacks equally sized images into one batch tensor.
template <typename T>
Tensor<T> to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ConfigError("to_batch: no images");
  const Image& first = *images.front();
  Tensor<T> t(Shape{static_cast<int>(images.size()), first.channels, first.height, first.width});
  auto d = t.data();
  std::size_t offset = 0;
  for (const Image* img : images) {
    if (!img->same_size(first)) throw ConfigError("to_batch: mixed image sizes");
    for (float v : img->values) d[offset++] = static_cast<T>(v);
  }
  return t;
}

template <typename T>
Image to_image(const Tensor<T>& t, int batch_index = 0) {
  const Shape& s = t.shape();
  Image img(s.c, s.h, s.w);
  const std::size_t base = static_cast<std::size_t>(batch_index) * s.c * s.plane();
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    img.values[i] = static_cast<float>(t.data()[base + i]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PNG codec (8-bit gray or RGB)

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what != nullptr) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Writes 8-bit PNG bytes already quantised by the caller (planar input).
inline void write_png_bytes(const std::filesystem::path& path, int channels, int height, int width,
                            const std::vector<std::uint8_t>& planar) {
  if (channels != 1 && channels != 3) throw ConfigError("PNG export needs 1 or 3 channels");
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());
  std::string error;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed: " + path.string());
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(width) * channels);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed for " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the byte stream reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        row[static_cast<std::size_t>(x) * channels + c] =
            planar[c * plane + static_cast<std::size_t>(y) * width + x];
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngBytes {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> planar;
};

inline PngBytes read_png_bytes(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image: " + path.string());
  std::string error;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed: " + path.string());
  }
  PngBytes out;
  std::vector<std::uint8_t> interleaved;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decode failed for " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  interleaved.resize(stride * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = interleaved.data() + stride * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
  out.planar.resize(plane * out.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < out.channels; ++c)
        out.planar[c * plane + static_cast<std::size_t>(y) * out.width + x] =
            interleaved[stride * y + static_cast<std::size_t>(x) * out.channels + c];
  return out;
}

/// Clamps and quantises to 8 bits.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(img.values[i]);
  write_png_bytes(path, img.channels, img.height, img.width, bytes);
}

inline Image read_png(const std::filesystem::path& path) {
  const PngBytes raw = read_png_bytes(path);
  Image img(raw.channels, raw.height, raw.width);
  for (std::size_t i = 0; i < raw.planar.size(); ++i) img.values[i] = dequantize(raw.planar[i]);
  return img;
}

inline void write_residual_png(const std::filesystem::path& path, const Image& residual) {
  std::vector<std::uint8_t> bytes(residual.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = encode_residual(residual.values[i]);
  write_png_bytes(path, residual.channels, residual.height, residual.width, bytes);
}

inline Image read_residual_png(const std::filesystem::path& path) {
  const PngBytes raw = read_png_bytes(path);
  Image img(raw.channels, raw.height, raw.width);
  for (std::size_t i = 0; i < raw.planar.size(); ++i) img.values[i] = decode_residual(raw.planar[i]);
  return img;
}

/// Raw float32 dump: "RSCNRAW1", u32 channels, height, width, then values.
inline void write_raw(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write("RSCNRAW1", 8);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.channels),
                                 static_cast<std::uint32_t>(img.height),
                                 static_cast<std::uint32_t>(img.width)};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  os.write(reinterpret_cast<const char*>(img.values.data()),
           static_cast<std::streamsize>(img.values.size() * sizeof(float)));
  if (!os) throw IoError("failed writing raw image: " + path.string());
}

inline Image read_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open raw image: " + path.string());
  char magic[8];
  std::uint32_t dims[3];
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!is || std::string(magic, 8) != "RSCNRAW1") throw IoError("not a raw image: " + path.string());
  Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  is.read(reinterpret_cast<char*>(img.values.data()),
          static_cast<std::streamsize>(img.values.size() * sizeof(float)));
  if (!is) throw IoError("truncated raw image: " + path.string());
  return img;
}

}  // namespace rescan
