#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bevlat::png {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<uint8_t> pixels;  ///< row-major, interleaved
};

struct Image16 {
  int width = 0;
  int height = 0;
  std::vector<uint16_t> pixels;  ///< row-major, single channel
};

void write_rgb8(const std::filesystem::path& path, const Image8& image);
Image8 read_rgb8(const std::filesystem::path& path);

void write_gray16(const std::filesystem::path& path, const Image16& image);
Image16 read_gray16(const std::filesystem::path& path);

}  // namespace bevlat::png
