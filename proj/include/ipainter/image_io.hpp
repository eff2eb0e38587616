#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ipainter/tensor.hpp"

namespace ipainter {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit v in [0, 255] <-> 2 v / 255 - 1 in [-1, 1].
inline double from_byte(std::uint8_t v) { return 2.0 * v / 255.0 - 1.0; }

// Round half up, clamped to [0, 255].
inline std::uint8_t to_byte(double x) {
  const double v = std::floor((x + 1.0) * 127.5 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

struct LoadedImage {
  Tensor pixels;               // 1 (gray) or 3 (RGB) channels in [-1, 1]
  std::optional<Tensor> alpha;  // single channel in [0, 1], when the PNG has one
};

namespace detail {

struct PngImage {
  png_image image{};
  PngImage() {
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

inline LoadedImage finish_decode(PngImage& png, const std::string& origin) {
  const bool color = (png.image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool has_alpha = (png.image.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  png.image.format = color ? (has_alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB) : (has_alpha ? PNG_FORMAT_GA : PNG_FORMAT_GRAY);
  const int channels = color ? 3 : 1;
  const int stride_channels = channels + (has_alpha ? 1 : 0);
  const int width = static_cast<int>(png.image.width);
  const int height = static_cast<int>(png.image.height);
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, buf.data(), 0, nullptr))
    throw IoError(origin + ": " + png.image.message);

  LoadedImage out{Tensor(Shape{channels, height, width}), std::nullopt};
  if (has_alpha) out.alpha = Tensor(Shape{1, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t px = (static_cast<std::size_t>(y) * width + x) * stride_channels;
      for (int c = 0; c < channels; ++c) out.pixels.at(c, y, x) = from_byte(buf[px + c]);
      if (has_alpha) out.alpha->at(0, y, x) = buf[px + channels] / 255.0;
    }
  return out;
}

}  // namespace detail

inline LoadedImage decode_png(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  detail::PngImage png;
  if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
    throw IoError(origin + ": " + png.image.message);
  return detail::finish_decode(png, origin);
}

inline LoadedImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes, path.string());
}

// Gray (1 channel) or RGB (3 channels), optionally with a 1 x H x W alpha in [0, 1].
inline std::vector<std::uint8_t> encode_png(const Tensor& image, const Tensor* alpha = nullptr) {
  const Shape s = image.shape();
  if (s.channels != 1 && s.channels != 3)
    throw std::invalid_argument("PNG output needs 1 or 3 channels, got " + std::to_string(s.channels));
  if (alpha && alpha->shape() != Shape{1, s.height, s.width})
    throw std::invalid_argument("PNG alpha must be 1 x H x W");
  const int stride = s.channels + (alpha ? 1 : 0);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(stride) * s.plane());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const std::size_t px = (static_cast<std::size_t>(y) * s.width + x) * stride;
      for (int c = 0; c < s.channels; ++c) buf[px + c] = to_byte(image.at(c, y, x));
      if (alpha) buf[px + s.channels] = static_cast<std::uint8_t>(std::clamp(std::floor(alpha->at(0, y, x) * 255.0 + 0.5), 0.0, 255.0));
    }

  detail::PngImage png;
  png.image.width = static_cast<png_uint_32>(s.width);
  png.image.height = static_cast<png_uint_32>(s.height);
  png.image.format = s.channels == 3 ? (alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB) : (alpha ? PNG_FORMAT_GA : PNG_FORMAT_GRAY);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, buf.data(), 0, nullptr))
    throw IoError(std::string("PNG encode: ") + png.image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, buf.data(), 0, nullptr))
    throw IoError(std::string("PNG encode: ") + png.image.message);
  out.resize(size);
  return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

inline void save_image(const Tensor& image, const std::filesystem::path& path) { write_file(path, encode_png(image)); }

// Gray value >= 128 keeps the pixel. Color PNGs are reduced to luminance by libpng.
inline Mask load_mask(const std::filesystem::path& path, std::optional<std::pair<int, int>> expected_hw = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::PngImage png;
  if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
    throw IoError(path.string() + ": " + png.image.message);
  png.image.format = PNG_FORMAT_GRAY;
  const int width = static_cast<int>(png.image.width);
  const int height = static_cast<int>(png.image.height);
  if (expected_hw && (expected_hw->first != height || expected_hw->second != width))
    throw std::invalid_argument(path.string() + ": mask is " + std::to_string(height) + "x" + std::to_string(width) +
                                " but image is " + std::to_string(expected_hw->first) + "x" +
                                std::to_string(expected_hw->second));
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, buf.data(), 0, nullptr))
    throw IoError(path.string() + ": " + png.image.message);
  Mask m(Shape{1, height, width}, false);
  for (std::size_t i = 0; i < buf.size(); ++i) m.set(i, buf[i] >= 128);
  return m;
}

inline std::vector<std::uint8_t> encode_mask_png(const Mask& mask) {
  Tensor t(Shape{1, mask.shape().height, mask.shape().width});
  for (int y = 0; y < mask.shape().height; ++y)
    for (int x = 0; x < mask.shape().width; ++x) t.at(0, y, x) = mask.keep(0, y, x) ? 1.0 : -1.0;
  return encode_png(t);
}

}  // namespace ipainter
