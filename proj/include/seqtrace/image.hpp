#pragma once

// 8-bit RGB image container plus lossless PNG round-trip (libpng's
// simplified API). Pixels are row-major, interleaved RGB.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace seqtrace {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // size = 3 * width * height

  static ImageU8 filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
    ImageU8 im;
    im.width = w;
    im.height = h;
    im.rgb.resize(static_cast<size_t>(3) * w * h);
    for (size_t i = 0; i < im.rgb.size(); i += 3) {
      im.rgb[i] = r;
      im.rgb[i + 1] = g;
      im.rgb[i + 2] = b;
    }
    return im;
  }

  uint8_t& at(int row, int col, int ch) {
    return rgb[(static_cast<size_t>(row) * width + col) * 3 + ch];
  }
  uint8_t at(int row, int col, int ch) const {
    return rgb[(static_cast<size_t>(row) * width + col) * 3 + ch];
  }

  bool operator==(const ImageU8& o) const {
    return width == o.width && height == o.height && rgb == o.rgb;
  }
};

inline void write_png(const std::string& path, const ImageU8& im) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(im.width);
  png.height = static_cast<png_uint_32>(im.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, im.rgb.data(), 0,
                               nullptr))
    throw std::runtime_error("failed to write " + path + ": " + png.message);
}

inline ImageU8 read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw std::runtime_error("failed to read " + path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  ImageU8 im;
  im.width = static_cast<int>(png.width);
  im.height = static_cast<int>(png.height);
  im.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, im.rgb.data(), 0, nullptr))
    throw std::runtime_error("failed to decode " + path + ": " + png.message);
  return im;
}

// [3,H,W] float tensor in [0,1].
inline Tensor image_to_tensor(const ImageU8& im) {
  Tensor t = Tensor::zeros({3, im.height, im.width});
  size_t plane = static_cast<size_t>(im.height) * im.width;
  for (int r = 0; r < im.height; ++r)
    for (int c = 0; c < im.width; ++c)
      for (int ch = 0; ch < 3; ++ch)
        t.data()[ch * plane + static_cast<size_t>(r) * im.width + c] =
            static_cast<float>(im.at(r, c, ch)) / 255.0f;
  return t;
}

inline ImageU8 tensor_to_image(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw std::runtime_error("tensor_to_image expects [3,H,W], got " +
                             shape_str(t.shape()));
  ImageU8 im;
  im.height = t.dim(1);
  im.width = t.dim(2);
  im.rgb.resize(static_cast<size_t>(3) * im.width * im.height);
  size_t plane = static_cast<size_t>(im.height) * im.width;
  for (int r = 0; r < im.height; ++r)
    for (int c = 0; c < im.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        float v = t.data()[ch * plane + static_cast<size_t>(r) * im.width + c];
        v = std::min(1.0f, std::max(0.0f, v));
        im.at(r, c, ch) = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  return im;
}

}  // namespace seqtrace
