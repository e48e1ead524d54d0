#include "maskdiff/image_io.hpp"

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

namespace maskdiff {

namespace fs = std::filesystem;

namespace {

enum class Format { Png, Jpeg, Unknown };

Format sniff(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path.string() + "'");
  std::array<unsigned char, 8> magic{};
  in.read(reinterpret_cast<char*>(magic.data()), magic.size());
  if (in.gcount() >= 8 && png_sig_cmp(magic.data(), 0, 8) == 0) return Format::Png;
  if (in.gcount() >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) {
    return Format::Jpeg;
  }
  return Format::Unknown;
}

RawImage read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error("PNG decode failed for '" + path.string() + "': " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RawImage raw;
  raw.width = static_cast<int>(img.width);
  raw.height = static_cast<int>(img.height);
  raw.channels = color ? 3 : 1;
  raw.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, raw.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("PNG decode failed for '" + path.string() + "': " + img.message);
  }
  return raw;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RawImage read_jpeg(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw std::runtime_error("cannot open image '" + path.string() + "'");

  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  RawImage raw;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("JPEG decode failed for '" + path.string() + "'");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  raw.width = static_cast<int>(cinfo.output_width);
  raw.height = static_cast<int>(cinfo.output_height);
  raw.channels = cinfo.output_components;
  raw.pixels.resize(static_cast<size_t>(raw.width) * raw.height * raw.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.pixels.data() +
                   static_cast<size_t>(cinfo.output_scanline) * raw.width * raw.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return raw;
}

}  // namespace

RawImage read_image(const fs::path& path) {
  switch (sniff(path)) {
    case Format::Png:
      return read_png(path);
    case Format::Jpeg:
      return read_jpeg(path);
    default:
      throw std::runtime_error("'" + path.string() + "' is neither PNG nor JPEG");
  }
}

void write_png(const fs::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("write_png: only gray or RGB images are supported");
  }
  if (image.pixels.size() != static_cast<size_t>(image.width) * image.height * image.channels) {
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

uint8_t encode_pixel(float v) {
  const double clamped = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<uint8_t>(std::lround((clamped + 1.0) * 127.5));
}

Image to_tensor(const RawImage& raw) {
  Image out(1, raw.channels, raw.height, raw.width);
  for (int c = 0; c < raw.channels; ++c) {
    for (int y = 0; y < raw.height; ++y) {
      for (int x = 0; x < raw.width; ++x) out.at(0, c, y, x) = decode_pixel(raw.at(y, x, c));
    }
  }
  return out;
}

RawImage from_tensor(const Image& image, int index) {
  if (image.c() != 1 && image.c() != 3) {
    throw std::invalid_argument("from_tensor: only 1 or 3 channel images can be encoded");
  }
  RawImage raw{image.w(), image.h(), image.c(), {}};
  raw.pixels.resize(static_cast<size_t>(raw.width) * raw.height * raw.channels);
  for (int c = 0; c < raw.channels; ++c) {
    for (int y = 0; y < raw.height; ++y) {
      for (int x = 0; x < raw.width; ++x) raw.at(y, x, c) = encode_pixel(image.at(index, c, y, x));
    }
  }
  return raw;
}

RawImage mask_to_raw(const Mask& mask, int index) {
  RawImage raw{mask.w(), mask.h(), 1, {}};
  raw.pixels.resize(static_cast<size_t>(raw.width) * raw.height);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      raw.at(y, x, 0) = mask.at(index, 0, y, x) >= 0.5f ? 255 : 0;
    }
  }
  return raw;
}

bool is_image_file(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace maskdiff
