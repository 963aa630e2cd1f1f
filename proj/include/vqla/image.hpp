#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace vqla {

// Interleaved H x W x C image with values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t size() const { return data.size(); }
  bool operator==(const Image& o) const = default;
};

// Rounds every value to the nearest multiple of 1/255 after clipping to [0, 1];
// the result survives an 8-bit write/read unchanged.
Image quantize8(const Image& img);
std::vector<std::uint8_t> to_bytes(const Image& img);
Image from_bytes(const std::vector<std::uint8_t>& bytes, int height, int width, int channels);

// Format follows the extension: .ppm (binary P6) or .png. Writes are 8-bit RGB.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);

double mean_squared_error(const Image& a, const Image& b);

}  // namespace vqla
