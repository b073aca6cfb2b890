/* Copyright 2026 The SSR Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// 8-bit RGB image I/O: binary PPM (P6), PNG through libpng, and u8 [H, W, 3]
// .npy arrays.

#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "ssr/error.hpp"
#include "ssr/npy.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

inline void write_ppm(const Tensor& rgb, const std::filesystem::path& path) {
  if (rgb.dtype() != DType::u8 || rgb.rank() != 3 || rgb.dim(2) != 3) {
    throw InvalidArgument("write_ppm expects u8 [H, W, 3]");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << rgb.dim(1) << " " << rgb.dim(0) << "\n255\n";
  out.write(rgb.raw_bytes(), static_cast<std::streamsize>(rgb.nbytes()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)", 0);
  const auto pos = static_cast<std::uint64_t>(in.tellg());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header", pos);
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw FormatError(path.string() + ": only 8-bit PPM is supported", pos);
  }
  Tensor t(DType::u8, {h, w, 3});
  in.read(t.raw_bytes(), static_cast<std::streamsize>(t.nbytes()));
  if (static_cast<std::size_t>(in.gcount()) != t.nbytes()) {
    throw CorruptionError(path.string() + ": truncated PPM payload");
  }
  return t;
}

namespace png_detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace png_detail

/// Writes u8 [H, W, 3] as 8-bit RGB PNG.
inline void write_png(const Tensor& rgb, const std::filesystem::path& path) {
  if (rgb.dtype() != DType::u8 || rgb.rank() != 3 || rgb.dim(2) != 3) {
    throw InvalidArgument("write_png expects u8 [H, W, 3]");
  }
  png_detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  const auto h = static_cast<png_uint_32>(rgb.dim(0));
  const auto w = static_cast<png_uint_32>(rgb.dim(1));
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto data = rgb.values<std::uint8_t>();
  for (png_uint_32 y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * w * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads an 8-bit PNG, converting grey/palette/alpha variants to RGB.
inline Tensor read_png(const std::filesystem::path& path) {
  png_detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    throw FormatError(path.string() + ": not a PNG file", 0);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": corrupt PNG", 8);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  Tensor t(DType::u8, {static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), 3});
  auto data = t.values<std::uint8_t>();
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, data.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return t;
}

/// Dispatches on extension: .png, .ppm, or .npy (u8 [H, W, 3]).
inline Tensor load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  if (ext == ".npy") {
    Tensor t = load_tensor(path);
    if (t.dtype() != DType::u8 || t.rank() != 3 || t.dim(2) != 3) {
      throw DataError(path.string() + ": image arrays must be u8 [H, W, 3]");
    }
    return t;
  }
  throw DataError(path.string() + ": unsupported image extension '" + ext + "'");
}

}  // namespace ssr
