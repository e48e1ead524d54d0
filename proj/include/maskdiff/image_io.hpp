#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// 8-bit interleaved pixels, row-major, channels 1 (gray) or 3 (RGB).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  uint8_t at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

// Decodes PNG or JPEG (detected from the file signature). Alpha is dropped.
// Throws std::runtime_error on unreadable or undecodable files.
RawImage read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RawImage& image);

// v -> v / 127.5 - 1
inline float decode_pixel(uint8_t v) { return static_cast<float>(v / 127.5 - 1.0); }
// v -> round((clamp(v, -1, 1) + 1) * 127.5)
uint8_t encode_pixel(float v);

// 1 x C x H x W in [-1, 1].
Image to_tensor(const RawImage& raw);
// Sample `index` of a batch, encoded channel by channel.
RawImage from_tensor(const Image& image, int index = 0);
// {0, 1} mask plane to 0 / 255 gray.
RawImage mask_to_raw(const Mask& mask, int index = 0);

bool is_image_file(const std::filesystem::path& path);

}  // namespace maskdiff
