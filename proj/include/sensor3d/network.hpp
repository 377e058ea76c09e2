#pragma once

// U-Net-like sequence segmenter. Contraction and expansion layers are applied
// per slice with shared weights; two convolutional LSTM blocks tie the slices
// together, the second one collapsing the sequence into a single map that is
// projected to per-pixel probabilities for the centre slice.
//
// Layer names keep the historical numbering gaps (there is no conv_3, conv_6,
// ...), so reports can refer to rows of the reference architecture table.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sensor3d/autodiff.hpp"
#include "sensor3d/layers.hpp"
#include "sensor3d/parallel.hpp"

namespace sensor3d {

enum class Variant { Full, SingleSlice2d, Aggregation2d, Unidirectional };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::SingleSlice2d: return "single-slice-2d";
    case Variant::Aggregation2d: return "aggregation-2d";
    case Variant::Unidirectional: return "unidirectional";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "full") return Variant::Full;
  if (s == "single-slice-2d") return Variant::SingleSlice2d;
  if (s == "aggregation-2d") return Variant::Aggregation2d;
  if (s == "unidirectional") return Variant::Unidirectional;
  throw InvalidArgument("unknown variant '" + std::string(s) +
                        "' (expected full, single-slice-2d, aggregation-2d, unidirectional)");
}

struct NetworkConfig {
  std::size_t sequence_length = 3;
  std::size_t resolution = 128;
  std::size_t base_features = 64;
  std::size_t capacity_divisor = 1;
  Variant variant = Variant::Full;
  std::size_t classes = 1;

  std::size_t features() const { return base_features / capacity_divisor; }

  /// The single-slice variant always sees one slice.
  NetworkConfig normalized() const {
    NetworkConfig c = *this;
    if (c.variant == Variant::SingleSlice2d) c.sequence_length = 1;
    return c;
  }

  void validate() const {
    if (sequence_length == 0 || sequence_length % 2 == 0)
      throw InvalidArgument("sequence length must be odd and positive, got " + std::to_string(sequence_length));
    if (resolution == 0 || resolution % 8 != 0)
      throw InvalidArgument("resolution must be a positive multiple of 8, got " + std::to_string(resolution));
    if (capacity_divisor != 1 && capacity_divisor != 2 && capacity_divisor != 4 && capacity_divisor != 8)
      throw InvalidArgument("capacity divisor must be 1, 2, 4 or 8, got " + std::to_string(capacity_divisor));
    if (base_features == 0 || base_features % capacity_divisor != 0)
      throw InvalidArgument("base features " + std::to_string(base_features) + " not divisible by capacity divisor " +
                            std::to_string(capacity_divisor));
    if (classes == 0) throw InvalidArgument("class count must be positive");
    if (variant == Variant::SingleSlice2d && sequence_length != 1)
      throw InvalidArgument("single-slice-2d variant requires sequence length 1");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline std::string describe(const NetworkConfig& c) {
  return "sequence_length=" + std::to_string(c.sequence_length) + " resolution=" + std::to_string(c.resolution) +
         " base_features=" + std::to_string(c.base_features) +
         " capacity_divisor=" + std::to_string(c.capacity_divisor) + " variant=" + to_string(c.variant) +
         " classes=" + std::to_string(c.classes);
}

enum class LayerKind { Conv, MaxPool, Upsample, Concat, BidirClstm, Clstm, TimeSum, FinalConv };

struct LayerSpec {
  std::string name;
  LayerKind kind;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;  // 0 for parameter-free layers
  std::vector<std::string> inputs;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered name -> tensor map; order is creation order and is what
/// checkpoints, initialisation and optimiser state iterate over.
template <typename T>
class NetworkParams {
 public:
  void add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return it->second;
  }

  const Tensor<T>& at(const std::string& name) const { return entries_[index_of(name)].value; }
  Tensor<T>& at(const std::string& name) { return entries_[index_of(name)].value; }

  std::size_t size() const { return entries_.size(); }
  const NamedTensor<T>& operator[](std::size_t i) const { return entries_[i]; }
  NamedTensor<T>& operator[](std::size_t i) { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Layer names owning parameters, in order ("conv_1", ..., "bidir_2").
  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      std::string g = e.name.substr(0, e.name.find('.'));
      if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    return out;
  }

  friend bool operator==(const NetworkParams& a, const NetworkParams& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  std::vector<NamedTensor<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct Network {
  NetworkConfig config;
  std::vector<LayerSpec> layers;
  NetworkParams<T> params;

  const LayerSpec* find_layer(std::string_view name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> out;
    for (const auto& l : layers) out.push_back(l.name);
    return out;
  }
};

namespace detail {

inline bool has_first_clstm(Variant v) { return v != Variant::Aggregation2d; }

inline std::vector<LayerSpec> layer_table(const NetworkConfig& cfg) {
  const std::size_t f = cfg.features();
  std::vector<LayerSpec> L;
  auto conv = [&](std::string name, std::size_t in, std::size_t out, std::string from) {
    L.push_back({std::move(name), LayerKind::Conv, in, out, 3, {std::move(from)}});
  };
  auto pool = [&](std::string name, std::size_t c, std::string from) {
    L.push_back({std::move(name), LayerKind::MaxPool, c, c, 0, {std::move(from)}});
  };
  auto up = [&](std::string name, std::size_t c, std::string from) {
    L.push_back({std::move(name), LayerKind::Upsample, c, c, 0, {std::move(from)}});
  };
  auto cat = [&](std::string name, std::size_t a, std::size_t b, std::string skip, std::string from) {
    L.push_back({std::move(name), LayerKind::Concat, a + b, a + b, 0, {std::move(skip), std::move(from)}});
  };
  const LayerKind rnn = cfg.variant == Variant::Unidirectional ? LayerKind::Clstm : LayerKind::BidirClstm;

  conv("conv_1", 1, f, "input");
  conv("conv_2", f, f, "conv_1");
  pool("pool_1", f, "conv_2");
  conv("conv_4", f, 2 * f, "pool_1");
  conv("conv_5", 2 * f, 2 * f, "conv_4");
  pool("pool_2", 2 * f, "conv_5");
  conv("conv_7", 2 * f, 4 * f, "pool_2");
  conv("conv_8", 4 * f, 4 * f, "conv_7");
  pool("pool_3", 4 * f, "conv_8");
  std::string bottom = "pool_3";
  std::size_t bottom_channels = 4 * f;
  if (has_first_clstm(cfg.variant)) {
    L.push_back({"bidir_1", rnn, 4 * f, 8 * f, 3, {"pool_3"}});
    bottom = "bidir_1";
    bottom_channels = 8 * f;
  }
  up("up_1", bottom_channels, bottom);
  cat("concat_1", 4 * f, bottom_channels, "conv_8", "up_1");
  conv("conv_11", 4 * f + bottom_channels, 4 * f, "concat_1");
  conv("conv_12", 4 * f, 4 * f, "conv_11");
  up("up_2", 4 * f, "conv_12");
  cat("concat_2", 2 * f, 4 * f, "conv_5", "up_2");
  conv("conv_14", 6 * f, 2 * f, "concat_2");
  conv("conv_15", 2 * f, 2 * f, "conv_14");
  up("up_3", 2 * f, "conv_15");
  cat("concat_3", f, 2 * f, "conv_2", "up_3");
  conv("conv_17", 3 * f, f, "concat_3");
  if (cfg.variant == Variant::Aggregation2d)
    L.push_back({"aggregate", LayerKind::TimeSum, f, f, 0, {"conv_17"}});
  else
    L.push_back({"bidir_2", rnn, f, f, 3, {"conv_17"}});
  L.push_back({"conv_18", LayerKind::FinalConv, f, cfg.classes, 1, {L.back().name}});
  return L;
}

template <typename T>
void add_cell_params(NetworkParams<T>& p, const std::string& prefix, std::size_t in, std::size_t hidden) {
  for (std::size_t g = 0; g < 4; ++g)
    p.add(prefix + ".W_x" + kGateSuffix[g], Tensor<T>::zeros({hidden, in, 3, 3}));
  for (std::size_t g = 0; g < 4; ++g)
    p.add(prefix + ".W_h" + kGateSuffix[g], Tensor<T>::zeros({hidden, hidden, 3, 3}));
  for (std::size_t g = 0; g < 4; ++g) p.add(prefix + ".b_" + kGateSuffix[g], Tensor<T>::zeros({hidden}));
}

}  // namespace detail

/// Layer graph plus zero-filled parameters of the right shapes.
template <typename T>
Network<T> build(const NetworkConfig& requested) {
  NetworkConfig cfg = requested.normalized();
  cfg.validate();
  Network<T> net;
  net.config = cfg;
  net.layers = detail::layer_table(cfg);
  for (const auto& l : net.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::FinalConv:
        net.params.add(l.name + ".weight", Tensor<T>::zeros({l.out_channels, l.in_channels, l.kernel, l.kernel}));
        net.params.add(l.name + ".bias", Tensor<T>::zeros({l.out_channels}));
        break;
      case LayerKind::BidirClstm:
        detail::add_cell_params(net.params, l.name + ".fwd", l.in_channels, l.out_channels);
        detail::add_cell_params(net.params, l.name + ".bwd", l.in_channels, l.out_channels);
        break;
      case LayerKind::Clstm:
        detail::add_cell_params(net.params, l.name + ".fwd", l.in_channels, l.out_channels);
        break;
      default:
        break;
    }
  }
  return net;
}

/// Recurrent kernels get orthonormal rows (reshaped to [C_hid, C_hid*9]),
/// every other kernel Glorot-uniform, biases zero. Deterministic per seed.
template <typename T>
void init_params(NetworkParams<T>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& e : params) {
    Tensor<T>& t = e.value;
    if (t.rank() != 4) {
      t.fill(T{0});
      continue;
    }
    const std::size_t rows = t.dim(0);
    const std::size_t cols = t.size() / rows;
    if (e.name.find(".W_h") != std::string::npos) {
      std::normal_distribution<double> normal(0.0, 1.0);
      Eigen::MatrixXd a(cols, rows);
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = normal(rng);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
      Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
      const Eigen::MatrixXd r = qr.matrixQR().topRows(a.cols()).template triangularView<Eigen::Upper>();
      for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t[i * cols + j] = static_cast<T>(q(j, i));
    } else {
      const std::size_t receptive = t.dim(2) * t.dim(3);
      const double limit = std::sqrt(6.0 / static_cast<double>((t.dim(0) + t.dim(1)) * receptive));
      std::uniform_real_distribution<double> uniform(-limit, limit);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(rng));
    }
  }
}

template <typename T>
void init(Network<T>& net, std::uint64_t seed) {
  init_params(net.params, seed);
}

/// Parameters bound to one tape, indexed like NetworkParams.
template <typename T>
struct BoundParams {
  const NetworkParams<T>* params = nullptr;
  std::vector<Var<T>> vars;

  const Var<T>& operator()(const std::string& name) const { return vars[params->index_of(name)]; }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const NetworkParams<T>& params) {
  BoundParams<T> b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (const auto& e : params) b.vars.push_back(tape.parameter(e.value));
  return b;
}

/// Optional side channel of a forward pass: output shape per layer as
/// [sequence, C, H, W], and the values of one named layer.
template <typename T>
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> shapes;
  std::string capture_layer;
  std::vector<Tensor<T>> captured;

  const Shape* shape_of(std::string_view name) const {
    for (const auto& [n, s] : shapes)
      if (n == name) return &s;
    return nullptr;
  }
};

namespace detail {

template <typename T>
FusedCell<T> fused_from(const BoundParams<T>& p, const std::string& prefix) {
  CellVars<T> v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.input_kernels[g] = p(prefix + ".W_x" + kGateSuffix[g]);
    v.recurrent_kernels[g] = p(prefix + ".W_h" + kGateSuffix[g]);
    v.biases[g] = p(prefix + ".b_" + kGateSuffix[g]);
  }
  return fuse_cell(v);
}

template <typename T>
void record(ForwardTrace<T>* trace, const std::string& name, const std::vector<Var<T>>& seq) {
  if (!trace) return;
  const Shape& s = seq.front().shape();
  Shape full{seq.size()};
  full.insert(full.end(), s.begin(), s.end());
  trace->shapes.emplace_back(name, std::move(full));
  if (trace->capture_layer == name)
    for (const auto& v : seq) trace->captured.push_back(v.value());
}

}  // namespace detail

/// One spatial context: `slices` holds o tensors of shape [1,R,R].
/// Returns per-pixel probabilities [classes,R,R] for the centre slice.
template <typename T>
Var<T> forward_context(const Network<T>& net, const BoundParams<T>& p, const std::vector<Var<T>>& slices,
                       ForwardTrace<T>* trace = nullptr) {
  const NetworkConfig& cfg = net.config;
  const std::size_t r = cfg.resolution;
  if (slices.size() != cfg.sequence_length)
    throw InvalidArgument("forward: expected " + std::to_string(cfg.sequence_length) + " slices, got " +
                          std::to_string(slices.size()));
  for (const auto& s : slices)
    if (s.shape() != Shape{1, r, r})
      throw InvalidArgument("forward: slice shape " + shape_str(s.shape()) + " does not match [1," +
                            std::to_string(r) + "," + std::to_string(r) + "]");

  using Seq = std::vector<Var<T>>;
  auto conv = [&](const std::string& name, const Seq& xs) {
    const Var<T>& w = p(name + ".weight");
    const Var<T>& b = p(name + ".bias");
    Seq out = time_distributed<T>([&](const Var<T>& x) { return elu(conv2d(x, w, b)); }, xs);
    detail::record(trace, name, out);
    return out;
  };
  auto pool = [&](const std::string& name, const Seq& xs) {
    Seq out = time_distributed<T>([](const Var<T>& x) { return maxpool2x2(x); }, xs);
    detail::record(trace, name, out);
    return out;
  };
  auto up = [&](const std::string& name, const Seq& xs) {
    Seq out = time_distributed<T>([](const Var<T>& x) { return upsample2x2(x); }, xs);
    detail::record(trace, name, out);
    return out;
  };
  auto cat = [&](const std::string& name, const Seq& skip, const Seq& xs) {
    Seq out;
    for (std::size_t t = 0; t < xs.size(); ++t) out.push_back(concat_channels(skip[t], xs[t]));
    detail::record(trace, name, out);
    return out;
  };
  auto recurrent = [&](const std::string& name, const Seq& xs, ClstmMode mode) {
    Seq out = cfg.variant == Variant::Unidirectional
                  ? unidirectional_clstm(detail::fused_from(p, name + ".fwd"), xs, mode)
                  : bidirectional_clstm(detail::fused_from(p, name + ".fwd"), detail::fused_from(p, name + ".bwd"),
                                        xs, mode);
    detail::record(trace, name, out);
    return out;
  };
  if (trace) detail::record(trace, "input", slices);

  Seq c2 = conv("conv_2", conv("conv_1", slices));
  Seq c5 = conv("conv_5", conv("conv_4", pool("pool_1", c2)));
  Seq c8 = conv("conv_8", conv("conv_7", pool("pool_2", c5)));
  Seq bottom = pool("pool_3", c8);
  if (detail::has_first_clstm(cfg.variant)) bottom = recurrent("bidir_1", bottom, ClstmMode::Sequence);
  Seq c12 = conv("conv_12", conv("conv_11", cat("concat_1", c8, up("up_1", bottom))));
  Seq c15 = conv("conv_15", conv("conv_14", cat("concat_2", c5, up("up_2", c12))));
  Seq c17 = conv("conv_17", cat("concat_3", c2, up("up_3", c15)));
  Seq merged;
  if (cfg.variant == Variant::Aggregation2d) {
    merged = {add_n(c17)};
    detail::record(trace, "aggregate", merged);
  } else {
    merged = recurrent("bidir_2", c17, ClstmMode::Collapse);
  }
  Var<T> out = sigmoid(conv2d(merged.front(), p("conv_18.weight"), p("conv_18.bias")));
  detail::record(trace, "conv_18", Seq{out});
  return out;
}

namespace detail {

// Accepts [o,1,R,R] or [o,R,R].
template <typename T>
std::vector<Var<T>> context_leaves(Tape<T>& tape, const NetworkConfig& cfg, const Tensor<T>& context) {
  const Shape& s = context.shape();
  const std::size_t r = cfg.resolution;
  const bool ok = (s.size() == 4 && s[1] == 1 && s[2] == r && s[3] == r) || (s.size() == 3 && s[1] == r && s[2] == r);
  if (!ok || s[0] != cfg.sequence_length)
    throw InvalidArgument("context shape " + shape_str(s) + " does not match sequence length " +
                          std::to_string(cfg.sequence_length) + " at resolution " + std::to_string(r));
  std::vector<Var<T>> out;
  const std::size_t plane = r * r;
  for (std::size_t t = 0; t < s[0]; ++t) {
    std::vector<T> buf(context.data() + t * plane, context.data() + (t + 1) * plane);
    out.push_back(tape.constant(Tensor<T>({1, r, r}, std::move(buf))));
  }
  return out;
}

}  // namespace detail

/// Inference on a single context; returns [classes,R,R].
template <typename T>
Tensor<T> predict_context(const Network<T>& net, const Tensor<T>& context, ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape(false);
  BoundParams<T> p = bind_params(tape, net.params);
  std::vector<Var<T>> slices = detail::context_leaves(tape, net.config, context);
  return forward_context(net, p, slices, trace).value();
}

/// Batched inference: [B,o,1,R,R] -> [B,classes,R,R]. Contexts run in parallel.
template <typename T>
Tensor<T> forward(const Network<T>& net, const Tensor<T>& batch) {
  const NetworkConfig& cfg = net.config;
  const std::size_t r = cfg.resolution;
  const Shape& s = batch.shape();
  if (s.size() != 5 || s[1] != cfg.sequence_length || s[2] != 1 || s[3] != r || s[4] != r)
    throw InvalidArgument("forward: batch shape " + shape_str(s) + " does not match [B," +
                          std::to_string(cfg.sequence_length) + ",1," + std::to_string(r) + "," + std::to_string(r) +
                          "]");
  const std::size_t per_context = cfg.sequence_length * r * r;
  const std::size_t per_output = cfg.classes * r * r;
  Tensor<T> out({s[0], cfg.classes, r, r});
  parallel_for(s[0], [&](std::size_t b) {
    std::vector<T> buf(batch.data() + b * per_context, batch.data() + (b + 1) * per_context);
    Tensor<T> y = predict_context(net, Tensor<T>({cfg.sequence_length, 1, r, r}, std::move(buf)));
    std::copy_n(y.data(), per_output, out.data() + b * per_output);
  });
  return out;
}

/// Feature maps of `layer` for every sequence element, each map min-max
/// scaled to [0,1] (constant maps become zero).
template <typename T>
std::vector<Tensor<T>> export_activations(const Network<T>& net, const Tensor<T>& context, const std::string& layer) {
  const LayerSpec* spec = net.find_layer(layer);
  if (!spec) {
    std::string names;
    for (const auto& n : net.layer_names()) names += (names.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown layer '" + layer + "'; valid layers: " + names);
  }
  ForwardTrace<T> trace;
  trace.capture_layer = layer;
  predict_context(net, context, &trace);
  for (Tensor<T>& maps : trace.captured) {
    const std::size_t channels = maps.dim(0);
    const std::size_t plane = maps.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      T* m = maps.data() + c * plane;
      const auto [lo, hi] = std::minmax_element(m, m + plane);
      const T lo_v = *lo, range = *hi - *lo;
      for (std::size_t i = 0; i < plane; ++i) m[i] = range > T{0} ? (m[i] - lo_v) / range : T{0};
    }
  }
  return trace.captured;
}

}  // namespace sensor3d
