#pragma once

// File formats: PFM depth/probability maps, PNG images (libpng), view pair lists.

#include <png.h>

#include <algorithm>
#include <bit>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/errors.hpp"
#include "attnmvs/tensor.hpp"

namespace attnmvs {

namespace fs = std::filesystem;

namespace detail {

inline float swap_bytes(float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  return std::bit_cast<float>((u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24));
}

}  // namespace detail

inline void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw NotFound("file not found: " + path.string());
}

/// Single-channel PFM ("Pf"), little-endian, bottom-up scanlines.
template <typename T>
void write_pfm(const fs::path& path, const Tensor<T>& map) {
  if (map.rank() != 2) throw ShapeError("write_pfm: expected [H,W], got " + shape_str(map.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::int64_t h = map.dim(0), w = map.dim(1);
  out << "Pf\n" << w << ' ' << h << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(w));
  for (std::int64_t y = h - 1; y >= 0; --y) {
    for (std::int64_t x = 0; x < w; ++x) row[static_cast<std::size_t>(x)] = static_cast<float>(map[static_cast<std::size_t>(y * w + x)]);
    if constexpr (std::endian::native == std::endian::big)
      for (auto& v : row) v = detail::swap_bytes(v);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

/// Reads "Pf" (one channel) or "PF" (three channels, averaged) maps.
template <typename T = float>
Tensor<T> read_pfm(const fs::path& path) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string magic;
  std::int64_t w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (!in || (magic != "Pf" && magic != "PF") || w <= 0 || h <= 0 || scale == 0)
    throw ParseError(path.string(), 1, "malformed PFM header");
  const int channels = magic == "PF" ? 3 : 1;
  std::vector<float> raw(static_cast<std::size_t>(w * h * channels));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!in) throw ParseError(path.string(), 3, "truncated PFM payload");
  const bool little = scale < 0;
  if (little != (std::endian::native == std::endian::little))
    for (auto& v : raw) v = detail::swap_bytes(v);
  Tensor<T> out(Shape{h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const float* px = raw.data() + ((h - 1 - y) * w + x) * channels;
      float v = px[0];
      if (channels == 3) v = (px[0] + px[1] + px[2]) / 3.0f;
      out.data()[y * w + x] = static_cast<T>(v);
    }
  return out;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Decodes an 8- or 16-bit PNG to [3,H,W] in [0,1]; gray is replicated, alpha dropped.
template <typename T = float>
Tensor<T> read_png(const fs::path& path) {
  require_file(path);
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<unsigned char> pixels;
  png_uint_32 width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path.string(), 0, "invalid PNG data");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const std::int64_t h = height, w = width;
  Tensor<T> out(Shape{3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.data()[(c * h + y) * w + x] =
            static_cast<T>(pixels[static_cast<std::size_t>(y) * stride + static_cast<std::size_t>(x) * 3 + c]) / T(255);
  return out;
}

/// Encodes [3,H,W] values in [0,1] (clamped) as 8-bit RGB PNG.
template <typename T>
void write_png(const fs::path& path, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_png: expected [3,H,W], got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image[static_cast<std::size_t>((c * h + y) * w + x)]), 0.0, 1.0);
        pixels[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::int64_t y = 0; y < h; ++y) png_write_row(png, pixels.data() + y * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Image by extension: .png or .pfm (gray PFM replicated to three channels).
template <typename T = float>
Tensor<T> read_image(const fs::path& path) {
  if (path.extension() == ".pfm") {
    const auto gray = read_pfm<T>(path);
    const std::int64_t h = gray.dim(0), w = gray.dim(1);
    Tensor<T> out(Shape{3, h, w});
    for (int c = 0; c < 3; ++c) std::copy(gray.data(), gray.data() + h * w, out.data() + c * h * w);
    return out;
  }
  return read_png<T>(path);
}

/// Ranked source views per reference view, from a DTU-style pair file:
/// count, then per view "ref_id" and "n id score id score ...".
inline std::vector<std::pair<int, std::vector<int>>> read_pair_file(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  std::size_t cursor = 0;
  auto next_line = [&](const char* what) -> std::istringstream {
    while (cursor < lines.size() && lines[cursor].find_first_not_of(" \t\r") == std::string::npos) ++cursor;
    if (cursor >= lines.size()) throw ParseError(path.string(), static_cast<int>(cursor), std::string("missing ") + what);
    return std::istringstream(lines[cursor++]);
  };
  int count = 0;
  if (!(next_line("view count") >> count) || count < 0)
    throw ParseError(path.string(), static_cast<int>(cursor), "bad view count");
  std::vector<std::pair<int, std::vector<int>>> pairs;
  for (int i = 0; i < count; ++i) {
    int ref = 0;
    if (!(next_line("reference id") >> ref)) throw ParseError(path.string(), static_cast<int>(cursor), "bad reference id");
    auto row = next_line("source list");
    int n = 0;
    if (!(row >> n) || n < 0) throw ParseError(path.string(), static_cast<int>(cursor), "bad source count");
    std::vector<int> srcs;
    for (int k = 0; k < n; ++k) {
      int id = 0;
      double score = 0;
      if (!(row >> id >> score)) throw ParseError(path.string(), static_cast<int>(cursor), "truncated source list");
      srcs.push_back(id);
    }
    pairs.emplace_back(ref, std::move(srcs));
  }
  return pairs;
}

inline void write_pair_file(const fs::path& path, const std::vector<std::pair<int, std::vector<int>>>& pairs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << pairs.size() << '\n';
  for (const auto& [ref, srcs] : pairs) {
    out << ref << '\n' << srcs.size();
    for (std::size_t k = 0; k < srcs.size(); ++k) out << ' ' << srcs[k] << ' ' << (1000.0 - static_cast<double>(k));
    out << '\n';
  }
}

}  // namespace attnmvs
