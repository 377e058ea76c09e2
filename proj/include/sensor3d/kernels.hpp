#pragma once

// Raw loops behind the differentiable ops. Everything here works on flat
// row-major buffers; shape checking happens one level up in autodiff.hpp.

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace sensor3d::kernels {

template <typename T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMajorMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<T>>;

// col has shape [C*kh*kw, H*W]; out-of-image taps read as zero.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh,
            std::size_t kw, T* col) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * height * width;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - ph;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - pw;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          T* dst = row + y * W;
          if (sy < 0 || sy >= H) {
            for (std::ptrdiff_t xx = 0; xx < W; ++xx) dst[xx] = T{0};
            continue;
          }
          const T* src = plane + sy * W;
          const std::ptrdiff_t lo = std::min<std::ptrdiff_t>(W, std::max<std::ptrdiff_t>(0, -dx));
          const std::ptrdiff_t hi = std::max<std::ptrdiff_t>(lo, std::min<std::ptrdiff_t>(W, W - dx));
          for (std::ptrdiff_t xx = 0; xx < lo; ++xx) dst[xx] = T{0};
          for (std::ptrdiff_t xx = lo; xx < hi; ++xx) dst[xx] = src[xx + dx];
          for (std::ptrdiff_t xx = hi; xx < W; ++xx) dst[xx] = T{0};
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into dx.
template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh,
                std::size_t kw, T* dx) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dx + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * height * width;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - ph;
        const std::ptrdiff_t dxo = static_cast<std::ptrdiff_t>(kj) - pw;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const T* src = row + y * W;
          T* dst = plane + sy * W;
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dxo);
          const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(W, W - dxo);
          for (std::ptrdiff_t xx = lo; xx < hi; ++xx) dst[xx + dxo] += src[xx];
        }
      }
    }
  }
}

// out[Co, HW] = w[Co, K] * col[K, HW] + bias
template <typename T>
void conv_forward(const T* weight, const T* bias, const T* col, std::size_t out_channels, std::size_t k,
                  std::size_t pixels, T* out) {
  ConstMatrixMap<T> w(weight, out_channels, k);
  ConstMatrixMap<T> c(col, k, pixels);
  MatrixMap<T> o(out, out_channels, pixels);
  o.noalias() = w * c;
  for (std::size_t r = 0; r < out_channels; ++r) o.row(r).array() += bias[r];
}

template <typename T>
void conv_backward_weight(const T* grad_out, const T* col, std::size_t out_channels, std::size_t k,
                          std::size_t pixels, T* grad_weight) {
  ConstMatrixMap<T> g(grad_out, out_channels, pixels);
  ConstMatrixMap<T> c(col, k, pixels);
  MatrixMap<T> gw(grad_weight, out_channels, k);
  gw.noalias() += g * c.transpose();
}

template <typename T>
void conv_backward_bias(const T* grad_out, std::size_t out_channels, std::size_t pixels, T* grad_bias) {
  // Plain loop: Eigen's vectorised reductions sum in an address-dependent order.
  for (std::size_t r = 0; r < out_channels; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) acc += static_cast<double>(grad_out[r * pixels + i]);
    grad_bias[r] += static_cast<T>(acc);
  }
}

// grad_col[K, HW] = w^T * grad_out
template <typename T>
void conv_backward_col(const T* weight, const T* grad_out, std::size_t out_channels, std::size_t k,
                       std::size_t pixels, T* grad_col, bool accumulate) {
  ConstMatrixMap<T> w(weight, out_channels, k);
  ConstMatrixMap<T> g(grad_out, out_channels, pixels);
  MatrixMap<T> gc(grad_col, k, pixels);
  if (accumulate)
    gc.noalias() += w.transpose() * g;
  else
    gc.noalias() = w.transpose() * g;
}

}  // namespace sensor3d::kernels
