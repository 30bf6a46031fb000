#include "bevlat/png_io.hpp"

#include "bevlat/error.hpp"

#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

namespace bevlat::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  require(f != nullptr, "cannot open " + path.string());
  return f;
}

void write_png(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
               const std::vector<png_bytep>& rows) {
  File f = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png write failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);  // host little-endian -> PNG big-endian
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Decoded {
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::vector<uint8_t> bytes;
  size_t row_bytes = 0;
};

Decoded read_png(const std::filesystem::path& path) {
  File f = open(path, "rb");
  png_byte sig[8];
  require(std::fread(sig, 1, 8, f.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0, "not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  Decoded out;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("png read failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  if (out.bit_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  out.row_bytes = png_get_rowbytes(png, info);
  out.bytes.resize(out.row_bytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * out.row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void write_rgb8(const std::filesystem::path& path, const Image8& image) {
  require(image.channels == 3, "write_rgb8: expects 3 channels");
  require(image.pixels.size() == static_cast<size_t>(image.width) * image.height * 3, "write_rgb8: size mismatch");
  std::vector<png_bytep> rows(image.height);
  auto* base = const_cast<uint8_t*>(image.pixels.data());
  for (int y = 0; y < image.height; ++y) rows[y] = base + static_cast<size_t>(y) * image.width * 3;
  write_png(path, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

Image8 read_rgb8(const std::filesystem::path& path) {
  auto d = read_png(path);
  require(d.bit_depth == 8 && d.color_type == PNG_COLOR_TYPE_RGB, "expected 8-bit RGB PNG: " + path.string());
  Image8 out{d.width, d.height, 3, {}};
  out.pixels.resize(static_cast<size_t>(d.width) * d.height * 3);
  for (int y = 0; y < d.height; ++y)
    std::copy_n(d.bytes.data() + y * d.row_bytes, d.width * 3, out.pixels.data() + static_cast<size_t>(y) * d.width * 3);
  return out;
}

void write_gray16(const std::filesystem::path& path, const Image16& image) {
  require(image.pixels.size() == static_cast<size_t>(image.width) * image.height, "write_gray16: size mismatch");
  std::vector<png_bytep> rows(image.height);
  auto* base = reinterpret_cast<png_bytep>(const_cast<uint16_t*>(image.pixels.data()));
  for (int y = 0; y < image.height; ++y) rows[y] = base + static_cast<size_t>(y) * image.width * 2;
  write_png(path, image.width, image.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

Image16 read_gray16(const std::filesystem::path& path) {
  auto d = read_png(path);
  require(d.bit_depth == 16 && d.color_type == PNG_COLOR_TYPE_GRAY, "expected 16-bit gray PNG: " + path.string());
  Image16 out{d.width, d.height, {}};
  out.pixels.resize(static_cast<size_t>(d.width) * d.height);
  for (int y = 0; y < d.height; ++y)
    std::memcpy(out.pixels.data() + static_cast<size_t>(y) * d.width, d.bytes.data() + y * d.row_bytes,
                static_cast<size_t>(d.width) * 2);
  return out;
}

}  // namespace bevlat::png
