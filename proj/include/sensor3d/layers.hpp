#pragma once

// Time-distributed application and the peephole-free convolutional LSTM.
//
// Gate equations (all convolutions 3x3, same zero padding):
//   i = hard_sigmoid(W_xi * x + W_hi * h + b_i)
//   f = hard_sigmoid(W_xf * x + W_hf * h + b_f)
//   o = hard_sigmoid(W_xo * x + W_ho * h + b_o)
//   c' = f . c + i . tanh(W_xc * x + W_hc * h + b_c)
//   h' = o . tanh(c')
// The eight kernels are fused into one [4*C_hid, C_in + C_hid, 3, 3] kernel
// so each step is a single convolution over concat(x, h).

#include <array>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "sensor3d/autodiff.hpp"

namespace sensor3d {

enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kCellGate = 2, kOutputGate = 3 };
inline constexpr std::array<const char*, 4> kGateSuffix = {"i", "f", "c", "o"};

/// Applies `layer` to every element with the same parameters.
template <typename T, typename Layer>
std::vector<Var<T>> time_distributed(Layer&& layer, const std::vector<Var<T>>& sequence) {
  if (sequence.empty()) throw InvalidArgument("time_distributed: empty sequence");
  for (const auto& x : sequence)
    if (x.shape() != sequence.front().shape())
      throw InvalidArgument("time_distributed: element shape " + shape_str(x.shape()) + " differs from " +
                            shape_str(sequence.front().shape()));
  std::vector<Var<T>> out;
  out.reserve(sequence.size());
  for (const auto& x : sequence) out.push_back(layer(x));
  return out;
}

template <typename T>
struct ConvLSTMCellParams {
  std::array<Tensor<T>, 4> input_kernels;      // [C_hid, C_in, 3, 3]
  std::array<Tensor<T>, 4> recurrent_kernels;  // [C_hid, C_hid, 3, 3]
  std::array<Tensor<T>, 4> biases;             // [C_hid]

  static ConvLSTMCellParams zeros(std::size_t in_channels, std::size_t hidden) {
    ConvLSTMCellParams p;
    for (std::size_t g = 0; g < 4; ++g) {
      p.input_kernels[g] = Tensor<T>::zeros({hidden, in_channels, 3, 3});
      p.recurrent_kernels[g] = Tensor<T>::zeros({hidden, hidden, 3, 3});
      p.biases[g] = Tensor<T>::zeros({hidden});
    }
    return p;
  }

  std::size_t hidden_channels() const { return biases[0].dim(0); }
  std::size_t in_channels() const { return input_kernels[0].dim(1); }
};

template <typename T>
struct CellVars {
  std::array<Var<T>, 4> input_kernels;
  std::array<Var<T>, 4> recurrent_kernels;
  std::array<Var<T>, 4> biases;
};

template <typename T>
CellVars<T> bind_cell(Tape<T>& tape, const ConvLSTMCellParams<T>& p) {
  CellVars<T> v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.input_kernels[g] = tape.parameter(p.input_kernels[g]);
    v.recurrent_kernels[g] = tape.parameter(p.recurrent_kernels[g]);
    v.biases[g] = tape.parameter(p.biases[g]);
  }
  return v;
}

template <typename T>
struct FusedCell {
  Var<T> kernel;  // [4*C_hid, C_in + C_hid, 3, 3], gate blocks in i, f, c, o order
  Var<T> bias;    // [4*C_hid]
  std::size_t in_channels = 0;
  std::size_t hidden = 0;
};

template <typename T>
FusedCell<T> fuse_cell(const CellVars<T>& v) {
  const Shape& xs = v.input_kernels[0].shape();
  const Shape& hs = v.recurrent_kernels[0].shape();
  if (xs.size() != 4 || hs.size() != 4 || hs[0] != hs[1] || xs[0] != hs[0])
    throw InvalidArgument("clstm: input kernel " + shape_str(xs) + " and recurrent kernel " + shape_str(hs) +
                          " are inconsistent");
  for (std::size_t g = 1; g < 4; ++g) {
    if (v.input_kernels[g].shape() != xs || v.recurrent_kernels[g].shape() != hs ||
        v.biases[g].shape() != v.biases[0].shape())
      throw InvalidArgument("clstm: gate parameter shapes differ");
  }
  if (v.biases[0].shape() != Shape{hs[0]})
    throw InvalidArgument("clstm: bias " + shape_str(v.biases[0].shape()) + " does not match hidden size");
  std::vector<Var<T>> wx(v.input_kernels.begin(), v.input_kernels.end());
  std::vector<Var<T>> wh(v.recurrent_kernels.begin(), v.recurrent_kernels.end());
  std::vector<Var<T>> b(v.biases.begin(), v.biases.end());
  FusedCell<T> f;
  f.kernel = concat<T>({concat(wx, 0), concat(wh, 0)}, 1);
  f.bias = concat(b, 0);
  f.in_channels = xs[1];
  f.hidden = hs[0];
  return f;
}

/// One recurrence step; returns (h_t, c_t).
template <typename T>
std::pair<Var<T>, Var<T>> clstm_step(const FusedCell<T>& cell, const Var<T>& x, const Var<T>& h_prev,
                                     const Var<T>& c_prev) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[0] != cell.in_channels || h_prev.shape() != Shape{cell.hidden, xs[1], xs[2]} ||
      c_prev.shape() != h_prev.shape())
    throw InvalidArgument("clstm_step: input " + shape_str(xs) + ", hidden " + shape_str(h_prev.shape()) +
                          ", cell " + shape_str(c_prev.shape()) + " do not fit a cell with " +
                          std::to_string(cell.in_channels) + " inputs and " + std::to_string(cell.hidden) +
                          " hidden channels");
  const std::size_t hid = cell.hidden;
  Var<T> z = conv2d(concat_channels(x, h_prev), cell.kernel, cell.bias);
  Var<T> i = hard_sigmoid(slice_leading(z, kInputGate * hid, hid));
  Var<T> f = hard_sigmoid(slice_leading(z, kForgetGate * hid, hid));
  Var<T> g = tanh(slice_leading(z, kCellGate * hid, hid));
  Var<T> o = hard_sigmoid(slice_leading(z, kOutputGate * hid, hid));
  Var<T> c = add(mul(f, c_prev), mul(i, g));
  Var<T> h = mul(o, tanh(c));
  return {h, c};
}

template <typename T>
std::pair<Var<T>, Var<T>> clstm_step(const CellVars<T>& cell, const Var<T>& x, const Var<T>& h_prev,
                                     const Var<T>& c_prev) {
  return clstm_step(fuse_cell(cell), x, h_prev, c_prev);
}

/// Runs the cell over `sequence` from zero state and returns every hidden state.
template <typename T>
std::vector<Var<T>> clstm_unroll(const FusedCell<T>& cell, const std::vector<Var<T>>& sequence) {
  if (sequence.empty()) throw InvalidArgument("clstm: empty sequence");
  const Shape& s = sequence.front().shape();
  if (s.size() != 3) throw InvalidArgument("clstm: expected [C,H,W] elements, got " + shape_str(s));
  Tape<T>& tape = sequence.front().tape();
  Var<T> h = tape.constant(Tensor<T>::zeros({cell.hidden, s[1], s[2]}));
  Var<T> c = h;
  std::vector<Var<T>> out;
  out.reserve(sequence.size());
  for (const auto& x : sequence) {
    std::tie(h, c) = clstm_step(cell, x, h, c);
    out.push_back(h);
  }
  return out;
}

enum class ClstmMode { Sequence, Collapse };

/// Forward and backward passes summed per element (Sequence) or final states
/// summed into a single output (Collapse).
template <typename T>
std::vector<Var<T>> bidirectional_clstm(const FusedCell<T>& forward_cell, const FusedCell<T>& backward_cell,
                                        const std::vector<Var<T>>& sequence, ClstmMode mode) {
  if (sequence.empty()) throw InvalidArgument("bidirectional_clstm: empty sequence");
  if (forward_cell.hidden != backward_cell.hidden || forward_cell.in_channels != backward_cell.in_channels)
    throw InvalidArgument("bidirectional_clstm: forward and backward cells differ in shape");
  std::vector<Var<T>> fwd = clstm_unroll(forward_cell, sequence);
  std::vector<Var<T>> reversed(sequence.rbegin(), sequence.rend());
  std::vector<Var<T>> bwd = clstm_unroll(backward_cell, reversed);
  if (mode == ClstmMode::Collapse) return {add(fwd.back(), bwd.back())};
  std::vector<Var<T>> out;
  out.reserve(sequence.size());
  const std::size_t n = sequence.size();
  for (std::size_t t = 0; t < n; ++t) out.push_back(add(fwd[t], bwd[n - 1 - t]));
  return out;
}

template <typename T>
struct BidirectionalCLSTM {
  ConvLSTMCellParams<T> forward_cell;
  ConvLSTMCellParams<T> backward_cell;
  ClstmMode mode = ClstmMode::Sequence;
};

template <typename T>
std::vector<Var<T>> bidirectional_clstm(const BidirectionalCLSTM<T>& block, const std::vector<Var<T>>& sequence) {
  if (sequence.empty()) throw InvalidArgument("bidirectional_clstm: empty sequence");
  Tape<T>& tape = sequence.front().tape();
  return bidirectional_clstm(fuse_cell(bind_cell(tape, block.forward_cell)),
                             fuse_cell(bind_cell(tape, block.backward_cell)), sequence, block.mode);
}

/// Forward-only counterpart used by the unidirectional variant.
template <typename T>
std::vector<Var<T>> unidirectional_clstm(const FusedCell<T>& cell, const std::vector<Var<T>>& sequence,
                                         ClstmMode mode) {
  std::vector<Var<T>> h = clstm_unroll(cell, sequence);
  if (mode == ClstmMode::Collapse) return {h.back()};
  return h;
}

}  // namespace sensor3d
