#pragma once

// PNG read/write through libpng's simplified API. Images are [3,h,w] floats
// in [0,1]; masks are [h,w] bytes holding 0/1, stored on disk as 0/255.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dclr/numerics/dten.hpp"
#include "dclr/numerics/tensor.hpp"

namespace dclr {

using Mask = BasicTensor<std::uint8_t>;

namespace png {

namespace detail {
inline std::vector<std::uint8_t> read_raw(const std::filesystem::path& path, std::uint32_t format, std::size_t& h,
                                          std::size_t& w) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!std::filesystem::exists(path)) throw FormatError("png: missing file " + path.string());
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw FormatError("png: cannot read " + path.string() + ": " + img.message);
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("png: cannot decode " + path.string() + ": " + img.message);
  }
  h = img.height;
  w = img.width;
  return buf;
}

inline void write_raw(const std::filesystem::path& path, const std::vector<std::uint8_t>& buf, std::size_t h,
                      std::size_t w, std::uint32_t format) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw FormatError("png: cannot write " + path.string() + ": " + img.message);
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}
}  // namespace detail

inline Tensor read_rgb(const std::filesystem::path& path) {
  std::size_t h, w;
  const auto buf = detail::read_raw(path, PNG_FORMAT_RGB, h, w);
  Tensor t({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * h * w + i] = static_cast<float>(buf[3 * i + c]) / 255.0f;
  return t;
}

inline void write_rgb(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("png: expected [3,h,w] image, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> buf(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) buf[3 * i + c] = detail::to_byte(image[c * h * w + i]);
  detail::write_raw(path, buf, h, w, PNG_FORMAT_RGB);
}

/// Reads an 8-bit mask; pixels >= 128 become 1.
inline Mask read_mask(const std::filesystem::path& path) {
  std::size_t h, w;
  const auto buf = detail::read_raw(path, PNG_FORMAT_GRAY, h, w);
  Mask m({h, w});
  for (std::size_t i = 0; i < h * w; ++i) m[i] = buf[i] >= 128 ? 1 : 0;
  return m;
}

inline void write_mask(const std::filesystem::path& path, const Mask& mask) {
  if (mask.rank() != 2) throw ShapeError("png: expected [h,w] mask, got " + shape_str(mask.shape()));
  std::vector<std::uint8_t> buf(mask.numel());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask[i] ? 255 : 0;
  detail::write_raw(path, buf, mask.dim(0), mask.dim(1), PNG_FORMAT_GRAY);
}

}  // namespace png
}  // namespace dclr
