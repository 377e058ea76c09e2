#pragma once

// Per-slice intensity preprocessing and in-plane resampling.
//
// preprocess_slice: clip to the window, rescale to [0,1], CLAHE, then
// zero-mean / unit-std normalisation of the slice.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/tensor.hpp"

namespace sensor3d {

struct Window {
  float lo = -100.0f;
  float hi = 400.0f;
};

struct ClaheParams {
  std::size_t tiles_y = 8;
  std::size_t tiles_x = 8;
  double clip_fraction = 0.01;
  std::size_t bins = 256;
};

inline void require_image(const Tensor<float>& img, const char* what) {
  if (img.rank() != 2 || img.empty()) throw InvalidArgument(std::string(what) + " expects a non-empty [H,W] image, got " + shape_str(img.shape()));
}

inline Tensor<float> clip_window(const Tensor<float>& img, Window w) {
  if (!(w.lo < w.hi)) throw InvalidArgument("window needs lo < hi");
  Tensor<float> out = img;
  for (auto& v : out.vec()) v = std::clamp(v, w.lo, w.hi);
  return out;
}

/// Maps [lo,hi] linearly onto [0,1]; values are assumed already clipped.
inline Tensor<float> rescale_unit(const Tensor<float>& img, Window w) {
  Tensor<float> out = img;
  const float span = w.hi - w.lo;
  for (auto& v : out.vec()) v = (v - w.lo) / span;
  return out;
}

namespace detail {

// Tile boundaries: tile t covers [t*n/tiles, (t+1)*n/tiles).
inline std::size_t tile_edge(std::size_t t, std::size_t n, std::size_t tiles) { return t * n / tiles; }

inline std::size_t clahe_bin(float v, std::size_t bins) {
  const double b = std::floor(double(std::clamp(v, 0.0f, 1.0f)) * double(bins));
  return std::min(bins - 1, static_cast<std::size_t>(b));
}

// Clipped-histogram CDF of one tile, normalised to [0,1].
inline std::vector<double> tile_mapping(const Tensor<float>& img, std::size_t y0, std::size_t y1, std::size_t x0,
                                        std::size_t x1, const ClaheParams& p) {
  const std::size_t W = img.dim(1);
  std::vector<double> hist(p.bins, 0.0);
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) hist[clahe_bin(img.data()[y * W + x], p.bins)] += 1.0;
  const double pixels = double((y1 - y0) * (x1 - x0));
  const double limit = std::max(1.0, p.clip_fraction * pixels);
  double excess = 0.0;
  for (auto& h : hist)
    if (h > limit) excess += h - limit, h = limit;
  const double share = excess / double(p.bins);
  std::vector<double> map(p.bins);
  double acc = 0.0;
  for (std::size_t b = 0; b < p.bins; ++b) {
    acc += hist[b] + share;
    map[b] = acc / pixels;
  }
  return map;
}

// Neighbouring tile indices and the weight of the upper one for coordinate c.
inline void tile_blend(double c, const std::vector<double>& centres, std::size_t& lo, std::size_t& hi, double& w) {
  const std::size_t n = centres.size();
  if (c <= centres.front()) {
    lo = hi = 0;
    w = 0.0;
    return;
  }
  if (c >= centres.back()) {
    lo = hi = n - 1;
    w = 0.0;
    return;
  }
  hi = 1;
  while (centres[hi] < c) ++hi;
  lo = hi - 1;
  w = (c - centres[lo]) / (centres[hi] - centres[lo]);
}

}  // namespace detail

/// Contrast-limited adaptive histogram equalisation of an image in [0,1].
/// Each tile's histogram is clipped at max(1, clip_fraction * tile pixels),
/// the clipped mass is spread evenly over all bins, and pixels blend the four
/// nearest tile mappings bilinearly by distance to the tile centres.
inline Tensor<float> clahe(const Tensor<float>& img, const ClaheParams& p = {}) {
  require_image(img, "clahe");
  if (p.tiles_y == 0 || p.tiles_x == 0 || p.bins == 0) throw InvalidArgument("clahe needs at least one tile and one bin");
  const std::size_t H = img.dim(0), W = img.dim(1);
  const std::size_t ty = std::min(p.tiles_y, H), tx = std::min(p.tiles_x, W);
  std::vector<std::vector<double>> maps(ty * tx);
  std::vector<double> cy(ty), cx(tx);
  for (std::size_t i = 0; i < ty; ++i) {
    const std::size_t y0 = detail::tile_edge(i, H, ty), y1 = detail::tile_edge(i + 1, H, ty);
    cy[i] = 0.5 * double(y0 + y1) - 0.5;
    for (std::size_t j = 0; j < tx; ++j) {
      const std::size_t x0 = detail::tile_edge(j, W, tx), x1 = detail::tile_edge(j + 1, W, tx);
      maps[i * tx + j] = detail::tile_mapping(img, y0, y1, x0, x1, p);
    }
  }
  for (std::size_t j = 0; j < tx; ++j)
    cx[j] = 0.5 * double(detail::tile_edge(j, W, tx) + detail::tile_edge(j + 1, W, tx)) - 0.5;

  Tensor<float> out({H, W});
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t i0, i1;
    double wy;
    detail::tile_blend(double(y), cy, i0, i1, wy);
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t j0, j1;
      double wx;
      detail::tile_blend(double(x), cx, j0, j1, wx);
      const std::size_t b = detail::clahe_bin(img.data()[y * W + x], p.bins);
      const double top = (1 - wx) * maps[i0 * tx + j0][b] + wx * maps[i0 * tx + j1][b];
      const double bottom = (1 - wx) * maps[i1 * tx + j0][b] + wx * maps[i1 * tx + j1][b];
      out.data()[y * W + x] = float((1 - wy) * top + wy * bottom);
    }
  }
  return out;
}

/// Subtracts the slice mean and divides by the slice standard deviation. A
/// (near-)constant slice becomes all zeros.
inline Tensor<float> normalize_slice(const Tensor<float>& img) {
  double mean = 0.0;
  for (float v : img.vec()) mean += v;
  mean /= double(img.size());
  double var = 0.0;
  for (float v : img.vec()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(img.size()));
  Tensor<float> out(img.shape());
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = float((img[i] - mean) / sd);
  return out;
}

inline Tensor<float> preprocess_slice(const Tensor<float>& img, Window w = {}, const ClaheParams& p = {}) {
  require_image(img, "preprocess_slice");
  return normalize_slice(clahe(rescale_unit(clip_window(img, w), w), p));
}

enum class ResampleKind { Intensity, Mask, Probability };

/// Bilinear resampling to target x target with pixel-centre alignment.
/// Mask and probability inputs come back binarised at 0.5.
inline Tensor<float> resample_inplane(const Tensor<float>& img, std::size_t target, ResampleKind kind) {
  require_image(img, "resample_inplane");
  if (target == 0) throw InvalidArgument("resample target must be positive");
  const std::size_t H = img.dim(0), W = img.dim(1);
  Tensor<float> out({target, target});
  if (H == target && W == target) {
    out = img;
  } else {
    auto coord = [](std::size_t d, std::size_t src, std::size_t dst, std::size_t& a, std::size_t& b, double& t) {
      double c = (double(d) + 0.5) * double(src) / double(dst) - 0.5;
      c = std::clamp(c, 0.0, double(src - 1));
      a = static_cast<std::size_t>(std::floor(c));
      b = std::min(a + 1, src - 1);
      t = c - double(a);
    };
    for (std::size_t y = 0; y < target; ++y) {
      std::size_t y0, y1;
      double ty;
      coord(y, H, target, y0, y1, ty);
      for (std::size_t x = 0; x < target; ++x) {
        std::size_t x0, x1;
        double tx;
        coord(x, W, target, x0, x1, tx);
        const float* d = img.data();
        const double top = (1 - tx) * d[y0 * W + x0] + tx * d[y0 * W + x1];
        const double bottom = (1 - tx) * d[y1 * W + x0] + tx * d[y1 * W + x1];
        out.data()[y * target + x] = float((1 - ty) * top + ty * bottom);
      }
    }
  }
  if (kind != ResampleKind::Intensity)
    for (auto& v : out.vec()) v = v >= 0.5f ? 1.0f : 0.0f;
  return out;
}

inline Tensor<float> mask_to_float(const Tensor<std::uint8_t>& m) { return m.cast<float>(); }

inline Tensor<std::uint8_t> float_to_mask(const Tensor<float>& m) {
  Tensor<std::uint8_t> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= 0.5f ? 1 : 0;
  return out;
}

}  // namespace sensor3d
