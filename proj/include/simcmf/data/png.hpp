#pragma once

// Single-channel PNG label maps through libpng. Written as 16-bit grayscale;
// 8- and 16-bit grayscale files are accepted on read.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "simcmf/core/error.hpp"
#include "simcmf/data/instances.hpp"

namespace simcmf {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_label_png(const std::filesystem::path& path, const LabelGrid& grid) {
  for (auto v : grid.labels)
    if (v < 0 || v > 65535)
      throw ValidationError("label value " + std::to_string(v) + " does not fit in 16 bits");
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot open " + path.string() + " for writing");

  std::string err;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (!png) throw Error("png: out of memory");
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> rows(static_cast<std::size_t>(grid.height * grid.width * 2));
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(grid.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png write failed for " + path.string() + ": " + err);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(grid.width),
               static_cast<png_uint_32>(grid.height), 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the encoded bytes reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (std::int64_t i = 0; i < grid.height * grid.width; ++i) {
    const auto v = static_cast<std::uint16_t>(grid.labels[i]);
    rows[2 * i] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
    rows[2 * i + 1] = static_cast<png_byte>(v & 0xff);
  }
  for (std::int64_t r = 0; r < grid.height; ++r) row_ptrs[r] = rows.data() + r * grid.width * 2;
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline LabelGrid read_label_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw LoadError("cannot open label file " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw LoadError(path.string() + " is not a PNG file");

  std::string err;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (!png) throw Error("png: out of memory");
  png_infop info = png_create_info_struct(png);
  LabelGrid grid;
  std::vector<png_byte> rows;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("png read failed for " + path.string() + ": " + err);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError(path.string() + ": label PNG must be 8- or 16-bit single-channel grayscale");
  }
  const std::size_t bpp = depth / 8;
  rows.resize(static_cast<std::size_t>(width) * height * bpp);
  row_ptrs.resize(height);
  for (png_uint_32 r = 0; r < height; ++r) row_ptrs[r] = rows.data() + r * width * bpp;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<std::int64_t> labels(static_cast<std::size_t>(width) * height);
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = bpp == 2 ? (rows[2 * i] << 8) | rows[2 * i + 1] : rows[i];
  return LabelGrid(height, width, std::move(labels));
}

}  // namespace simcmf
