#pragma once

// Tape-based reverse-mode differentiation over the fixed set of tensor ops
// the network needs. A Tape owns every intermediate value of one forward
// pass; node ids are assigned in execution order, so parents always have
// smaller ids than their children and a reverse sweep over ids is a valid
// topological order.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/kernels.hpp"
#include "sensor3d/tensor.hpp"

namespace sensor3d {

enum class OpKind : std::uint8_t {
  Leaf,
  Conv2d,
  MaxPool2x2,
  Upsample2x2,
  Concat,
  Slice,
  Add,
  Mul,
  Scale,
  AddN,
  Elu,
  HardSigmoid,
  Tanh,
  Sigmoid,
  Sum,
  DiceDistance,
};

template <typename T>
class Tape;

template <typename T>
struct GradNode {
  using BackwardFn = std::function<void(Tape<T>&, std::size_t)>;

  OpKind kind = OpKind::Leaf;
  std::vector<std::size_t> parents;
  Tensor<T> owned;
  const Tensor<T>* borrowed = nullptr;
  Tensor<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  BackwardFn backward;  // captures whatever the rule needs (argmax, etc.)

  const Tensor<T>& value() const { return borrowed ? *borrowed : owned; }
};

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->node(id_).value(); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  /// With `record == false` no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const GradNode<T>& node(std::size_t id) const { return nodes_.at(id); }

  Var<T> constant(Tensor<T> value) { return push_leaf(std::move(value), nullptr, false); }

  /// Owned leaf that receives a gradient.
  Var<T> variable(Tensor<T> value) { return push_leaf(std::move(value), nullptr, record_); }

  /// Borrowed leaf; `value` must outlive the tape.
  Var<T> parameter(const Tensor<T>& value) { return push_leaf({}, &value, record_); }
  Var<T> borrowed_constant(const Tensor<T>& value) { return push_leaf({}, &value, false); }

  Var<T> push(OpKind kind, std::vector<std::size_t> parents, Tensor<T> value, typename GradNode<T>::BackwardFn fn) {
    GradNode<T> n;
    n.kind = kind;
    n.owned = std::move(value);
    if (record_) {
      for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
      if (n.requires_grad) n.backward = std::move(fn);
    }
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Gradient buffer of node `id`, zero-initialized on first access.
  Tensor<T>& grad_buffer(std::size_t id) {
    GradNode<T>& n = nodes_.at(id);
    if (n.grad.shape() != n.value().shape()) n.grad = Tensor<T>::zeros(n.value().shape());
    return n.grad;
  }

  bool wants_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulated at `v`, or nullptr if nothing reached it.
  const Tensor<T>* grad(const Var<T>& v) const {
    const GradNode<T>& n = nodes_.at(v.id());
    return n.grad.empty() && !n.value().empty() ? nullptr : &n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>{};
  }

  void backward(const Var<T>& loss) {
    if (!record_) throw InvalidArgument("backward on a tape that is not recording");
    if (loss.value().size() != 1)
      throw InvalidArgument("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      GradNode<T>& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

 private:
  Var<T> push_leaf(Tensor<T> value, const Tensor<T>* borrowed, bool requires_grad) {
    GradNode<T> n;
    n.owned = std::move(value);
    n.borrowed = borrowed;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool record_;
  std::deque<GradNode<T>> nodes_;
};

namespace detail {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw InvalidArgument("operands live on different tapes");
}

template <typename T, typename F, typename DF>
Var<T> unary_map(const Var<T>& x, OpKind kind, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().push(kind, {xid}, std::move(out), [xid, df](Tape<T>& tape, std::size_t self) {
    if (!tape.wants_grad(xid)) return;
    const Tensor<T>& g = tape.node(self).grad;
    const Tensor<T>& in = tape.node(xid).value();
    const Tensor<T>& y = tape.node(self).value();
    Tensor<T>& gx = tape.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], y[i]);
  });
}

}  // namespace detail

/// Same-padded 2D cross-correlation: input [C_in,H,W], kernel [C_out,C_in,kh,kw], bias [C_out].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Shape& bs = b.shape();
  if (xs.size() != 3 || ws.size() != 4 || bs.size() != 1 || ws[1] != xs[0] || bs[0] != ws[0])
    throw InvalidArgument("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws) +
                          " and bias " + shape_str(bs));
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw InvalidArgument("conv2d: kernel " + shape_str(ws) + " must have odd extents");

  const std::size_t cin = xs[0], h = xs[1], wd = xs[2], cout = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t k = cin * kh * kw, pixels = h * wd;
  const bool pointwise = kh == 1 && kw == 1;

  Tensor<T> out({cout, h, wd});
  if (pointwise) {
    kernels::conv_forward(w.value().data(), b.value().data(), x.value().data(), cout, k, pixels, out.data());
  } else {
    std::vector<T> col(k * pixels);
    kernels::im2col(x.value().data(), cin, h, wd, kh, kw, col.data());
    kernels::conv_forward(w.value().data(), b.value().data(), col.data(), cout, k, pixels, out.data());
  }

  const std::size_t xid = x.id(), wid = w.id(), bid = b.id();
  return x.tape().push(OpKind::Conv2d, {xid, wid, bid}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const T* g = tape.node(self).grad.data();
    if (tape.wants_grad(bid)) kernels::conv_backward_bias(g, cout, pixels, tape.grad_buffer(bid).data());
    const T* xin = tape.node(xid).value().data();
    std::vector<T> col;
    if (!pointwise && (tape.wants_grad(wid) || tape.wants_grad(xid))) {
      col.resize(k * pixels);
      kernels::im2col(xin, cin, h, wd, kh, kw, col.data());
    }
    if (tape.wants_grad(wid))
      kernels::conv_backward_weight(g, pointwise ? xin : col.data(), cout, k, pixels, tape.grad_buffer(wid).data());
    if (tape.wants_grad(xid)) {
      const T* wv = tape.node(wid).value().data();
      if (pointwise) {
        kernels::conv_backward_col(wv, g, cout, k, pixels, tape.grad_buffer(xid).data(), true);
      } else {
        kernels::conv_backward_col(wv, g, cout, k, pixels, col.data(), false);
        kernels::col2im_add(col.data(), cin, h, wd, kh, kw, tape.grad_buffer(xid).data());
      }
    }
  });
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw InvalidArgument("maxpool2x2: expected [C,H,W], got " + shape_str(xs));
  if (xs[1] % 2 || xs[2] % 2) throw InvalidArgument("maxpool2x2: odd spatial extent in " + shape_str(xs));
  const std::size_t c = xs[0], h = xs[1], w = xs[2], oh = h / 2, ow = w / 2;
  const Tensor<T>& xv = x.value();
  Tensor<T> out({c, oh, ow});
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = (ch * h + 2 * i) * w + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (xv[cand[q]] > xv[best]) best = cand[q];
        const std::size_t o = (ch * oh + i) * ow + j;
        out[o] = xv[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const std::size_t xid = x.id();
  return x.tape().push(OpKind::MaxPool2x2, {xid}, std::move(out),
                       [xid, argmax = std::move(argmax)](Tape<T>& tape, std::size_t self) {
                         if (!tape.wants_grad(xid)) return;
                         const Tensor<T>& g = tape.node(self).grad;
                         Tensor<T>& gx = tape.grad_buffer(xid);
                         for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                       });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2x2(const Var<T>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw InvalidArgument("upsample2x2: expected [C,H,W], got " + shape_str(xs));
  const std::size_t c = xs[0], h = xs[1], w = xs[2], ow = 2 * w;
  const Tensor<T>& xv = x.value();
  Tensor<T> out({c, 2 * h, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < ow; ++j) out[(ch * 2 * h + i) * ow + j] = xv[(ch * h + i / 2) * w + j / 2];
  const std::size_t xid = x.id();
  return x.tape().push(OpKind::Upsample2x2, {xid}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    if (!tape.wants_grad(xid)) return;
    const Tensor<T>& g = tape.node(self).grad;
    Tensor<T>& gx = tape.grad_buffer(xid);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < ow; ++j) gx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * ow + j];
  });
}

/// Concatenation along `axis`; all other extents must agree. Zero-length parts are allowed.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw InvalidArgument("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw InvalidArgument("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    ids.push_back(p.id());
    widths.push_back(p.shape()[axis] * inner);
  }
  const std::size_t total = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.data() + o * total + offset);
    offset += widths[k];
  }
  return parts.front().tape().push(OpKind::Concat, ids, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const T* g = tape.node(self).grad.data();
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tape.wants_grad(ids[k]) && widths[k] > 0) {
        T* dst = tape.grad_buffer(ids[k]).data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) dst[o * widths[k] + i] += g[o * total + off + i];
      }
      off += widths[k];
    }
  });
}

/// Channel concatenation of [C1,H,W] and [C2,H,W], `a` first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[1] != bs[1] || as[2] != bs[2])
    throw InvalidArgument("concat_channels: spatial mismatch " + shape_str(as) + " vs " + shape_str(bs));
  return concat<T>({a, b}, 0);
}

/// Rows [begin, begin+count) of the leading axis.
template <typename T>
Var<T> slice_leading(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& xs = x.shape();
  if (xs.empty() || begin + count > xs[0])
    throw InvalidArgument("slice_leading: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                          ") outside " + shape_str(xs));
  const std::size_t inner = x.value().size() / xs[0];
  Shape out_shape = xs;
  out_shape[0] = count;
  Tensor<T> out(out_shape);
  std::copy_n(x.value().data() + begin * inner, count * inner, out.data());
  const std::size_t xid = x.id();
  return x.tape().push(OpKind::Slice, {xid}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    if (!tape.wants_grad(xid)) return;
    const Tensor<T>& g = tape.node(self).grad;
    T* dst = tape.grad_buffer(xid).data() + begin * inner;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().push(OpKind::Add, {aid, bid}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.node(self).grad;
    for (std::size_t id : {aid, bid}) {
      if (!tape.wants_grad(id)) continue;
      Tensor<T>& gx = tape.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().push(OpKind::Mul, {aid, bid}, std::move(out), [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.node(self).grad;
    if (tape.wants_grad(aid)) {
      const Tensor<T>& other = tape.node(bid).value();
      Tensor<T>& ga = tape.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * other[i];
    }
    if (tape.wants_grad(bid)) {
      const Tensor<T>& other = tape.node(aid).value();
      Tensor<T>& gb = tape.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return detail::unary_map(
      x, OpKind::Scale, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

/// Elementwise sum of equally shaped tensors.
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("add_n: no inputs");
  Tensor<T> out = xs.front().value();
  std::vector<std::size_t> ids{xs.front().id()};
  for (std::size_t k = 1; k < xs.size(); ++k) {
    detail::require_same_tape(xs.front(), xs[k]);
    require_same_shape(xs.front().value(), xs[k].value(), "add_n");
    const Tensor<T>& v = xs[k].value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    ids.push_back(xs[k].id());
  }
  return xs.front().tape().push(OpKind::AddN, ids, std::move(out), [ids](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.node(self).grad;
    for (std::size_t id : ids) {
      if (!tape.wants_grad(id)) continue;
      Tensor<T>& gx = tape.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

/// ELU with alpha = 1.
template <typename T>
Var<T> elu(const Var<T>& x) {
  return detail::unary_map(
      x, OpKind::Elu, [](T v) { return v > T{0} ? v : std::expm1(v); },
      [](T in, T out) { return in > T{0} ? T{1} : out + T{1}; });
}

/// clamp(0.2 x + 0.5, 0, 1)
template <typename T>
Var<T> hard_sigmoid(const Var<T>& x) {
  return detail::unary_map(
      x, OpKind::HardSigmoid,
      [](T v) { return std::clamp(T(0.2) * v + T(0.5), T{0}, T{1}); },
      [](T in, T) { return (in > T(-2.5) && in < T(2.5)) ? T(0.2) : T{0}; });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary_map(
      x, OpKind::Tanh, [](T v) { return std::tanh(v); }, [](T, T out) { return T{1} - out * out; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_map(
      x, OpKind::Sigmoid,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T out) { return out * (T{1} - out); });
}

/// Sum of all elements, shape [1].
template <typename T>
Var<T> sum(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().push(OpKind::Sum, {xid}, Tensor<T>::scalar(static_cast<T>(acc)), [xid](Tape<T>& tape, std::size_t self) {
    if (!tape.wants_grad(xid)) return;
    const T g = tape.node(self).grad[0];
    Tensor<T>& gx = tape.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// Central-difference gradient of a scalar function, evaluated in double precision.
inline Tensor<double> finite_difference_grad(const std::function<double(const Tensor<double>&)>& f,
                                             const Tensor<double>& x, double step = 1e-5) {
  if (!(step > 0.0)) throw InvalidArgument("finite_difference_grad: step must be positive");
  Tensor<double> probe = x;
  Tensor<double> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Central differences at selected coordinates only; `f` sees `x` perturbed in place.
inline std::vector<double> finite_difference_at(const std::function<double()>& f, Tensor<double>& x,
                                                const std::vector<std::size_t>& coords, double step = 1e-5) {
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t i : coords) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f();
    x[i] = orig - step;
    const double down = f();
    x[i] = orig;
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

}  // namespace sensor3d
