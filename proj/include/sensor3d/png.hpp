#pragma once

// PNG export: grayscale feature grids and colour overlays of predictions on
// scan slices (prediction outline red, ground-truth outline green, pixels on
// both outlines yellow).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/tensor.hpp"

namespace sensor3d {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 = gray, 3 = RGB
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

  std::uint8_t* at(std::size_t y, std::size_t x) { return pixels.data() + (y * width + x) * channels; }
  const std::uint8_t* at(std::size_t y, std::size_t x) const { return pixels.data() + (y * width + x) * channels; }
};

inline void write_png(const std::string& path, const Image& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path + ": " + png.message);
}

inline Image read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw IoError("cannot read PNG " + path + ": " + png.message);
  const bool colour = png.format & PNG_FORMAT_FLAG_COLOR;
  png.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img(png.width, png.height, colour ? 3 : 1);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path + ": " + png.message);
  }
  return img;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Tiles [C,H,W] maps (values in [0,1]) into a near-square grid with a
/// one-pixel gap.
inline Image feature_grid(const Tensor<float>& maps) {
  if (maps.rank() != 3) throw InvalidArgument("feature_grid expects [C,H,W], got " + shape_str(maps.shape()));
  const std::size_t C = maps.dim(0), H = maps.dim(1), W = maps.dim(2);
  const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(C))));
  const std::size_t rows = (C + cols - 1) / cols;
  Image img(cols * (W + 1) - 1, rows * (H + 1) - 1, 1);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t oy = (c / cols) * (H + 1), ox = (c % cols) * (W + 1);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) *img.at(oy + y, ox + x) = to_byte(maps.at(c, y, x));
  }
  return img;
}

/// Boundary pixels of a binary mask: foreground with a 4-neighbour outside.
inline std::vector<bool> outline(const Tensor<std::uint8_t>& mask) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<bool> edge(H * W, false);
  auto fg = [&](long y, long x) {
    return y >= 0 && x >= 0 && y < long(H) && x < long(W) && mask[std::size_t(y) * W + std::size_t(x)];
  };
  for (long y = 0; y < long(H); ++y)
    for (long x = 0; x < long(W); ++x)
      if (fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))) edge[y * W + x] = true;
  return edge;
}

/// Slice shown in gray (window mapped to [0,255]) with mask outlines.
inline Image overlay(const Tensor<float>& slice, float lo, float hi, const Tensor<std::uint8_t>& prediction,
                     const Tensor<std::uint8_t>* truth = nullptr) {
  if (slice.rank() != 2 || prediction.shape() != slice.shape() || (truth && truth->shape() != slice.shape()))
    throw InvalidArgument("overlay needs slice and masks on the same [H,W] grid");
  const std::size_t H = slice.dim(0), W = slice.dim(1);
  Image img(W, H, 3);
  const std::vector<bool> pred_edge = outline(prediction);
  const std::vector<bool> truth_edge = truth ? outline(*truth) : std::vector<bool>(H * W, false);
  for (std::size_t i = 0; i < H * W; ++i) {
    std::uint8_t* px = img.pixels.data() + 3 * i;
    const std::uint8_t g = to_byte((slice[i] - lo) / (hi - lo));
    px[0] = px[1] = px[2] = g;
    if (pred_edge[i] && truth_edge[i]) {
      px[0] = 255, px[1] = 255, px[2] = 0;
    } else if (pred_edge[i]) {
      px[0] = 255, px[1] = 0, px[2] = 0;
    } else if (truth_edge[i]) {
      px[0] = 0, px[1] = 255, px[2] = 0;
    }
  }
  return img;
}

}  // namespace sensor3d
