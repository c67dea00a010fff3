// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "toolshed/error.hpp"
#include "toolshed/value.hpp"

namespace toolshed {

/// Packed RGB8 image, row-major.
struct RgbImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;

  const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const { return pixels.data() + 3 * (std::size_t(y) * width + x); }
  std::uint8_t* at(std::uint32_t x, std::uint32_t y) { return pixels.data() + 3 * (std::size_t(y) * width + x); }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline AttachmentPtr make_image_attachment(std::string name, const RgbImage& img) {
  return std::make_shared<const Attachment>(Attachment{std::move(name), Media::RasterImage, img.width, img.height, img.pixels});
}

inline RgbImage image_from_attachment(const Attachment& a) {
  if (a.media != Media::RasterImage) throw BadArgs("attachment '" + a.name + "' is not an image");
  if (a.bytes.size() != 3ull * a.width * a.height) throw BadArgs("image byte length mismatch");
  return {a.width, a.height, a.bytes};
}

namespace png_detail {

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void read_fn(png_structp png, png_bytep out, png_size_t len) {
  auto* r = static_cast<Reader*>(png_get_io_ptr(png));
  if (r->pos + len > r->size) png_error(png, "truncated PNG");
  std::memcpy(out, r->data + r->pos, len);
  r->pos += len;
}

inline void write_fn(png_structp png, png_bytep in, png_size_t len) {
  auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  v->insert(v->end(), in, in + len);
}

inline void flush_fn(png_structp) {}

inline void error_fn(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }
inline void warn_fn(png_structp, png_const_charp) {}

}  // namespace png_detail

/// Decodes any PNG libpng understands into RGB8 (alpha dropped, palette and
/// grayscale expanded, 16-bit stripped).
inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw Error("png: bad signature");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::error_fn, png_detail::warn_fn);
  png_infop info = png_create_info_struct(png);
  png_detail::Reader reader{bytes.data(), bytes.size(), 0};
  RgbImage img;
  try {
    png_set_read_fn(png, &reader, png_detail::read_fn);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    if (png_get_rowbytes(png, info) != 3ull * img.width) throw Error("png: unexpected row layout");
    img.pixels.resize(3ull * img.width * img.height);
    std::vector<png_bytep> rows(img.height);
    for (std::uint32_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + 3ull * img.width * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::error_fn, png_detail::warn_fn);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, png_detail::write_fn, png_detail::flush_fn);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::uint32_t y = 0; y < img.height; ++y)
      png_write_row(png, const_cast<png_bytep>(img.pixels.data() + 3ull * img.width * y));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace toolshed
