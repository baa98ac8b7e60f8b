#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bimii {

// Interleaved 8-bit image; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
  int width = 0, height = 0, channels = 0;
  std::vector<uint8_t> data;

  uint8_t at(int y, int x, int c) const {
    return data[(size_t)((y * width + x) * channels + c)];
  }
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

}  // namespace bimii
