#pragma once

// Soft Dice loss, Adam, early stopping and the epoch loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sensor3d/autodiff.hpp"
#include "sensor3d/contexts.hpp"
#include "sensor3d/dataset.hpp"
#include "sensor3d/network.hpp"
#include "sensor3d/parallel.hpp"

namespace sensor3d {

constexpr double kDiceSmoothing = 1e-6;

struct TrainConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t patience = 100;
  double min_delta = 1e-5;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 1000;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw InvalidArgument("Adam betas must lie in (0,1)");
    if (!(epsilon > 0)) throw InvalidArgument("Adam epsilon must be positive");
    if (patience < 1) throw InvalidArgument("patience must be at least 1");
    if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
    if (max_epochs < 1) throw InvalidArgument("max epochs must be at least 1");
  }
};

template <typename T>
void require_same_grid(const Tensor<T>& p, const Tensor<T>& mask, const char* what) {
  if (p.shape() != mask.shape())
    throw InvalidArgument(std::string(what) + ": prediction " + shape_str(p.shape()) + " vs mask " + shape_str(mask.shape()));
}

/// (2 sum(mask*p) + s) / (sum(mask) + sum(p) + s) for plain tensors.
template <typename T>
double dice_distance_value(const Tensor<T>& p, const Tensor<T>& mask, double smooth = kDiceSmoothing) {
  require_same_grid(p, mask, "dice_distance");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += double(mask[i]) * double(p[i]);
    total += double(mask[i]) + double(p[i]);
  }
  return (2.0 * inter + smooth) / (total + smooth);
}

/// Soft Dice as a tape operation; the mask is a constant.
template <typename T>
Var<T> dice_distance(const Var<T>& p, const Tensor<T>& mask, double smooth = kDiceSmoothing) {
  const Tensor<T>& pv = p.value();
  require_same_grid(pv, mask, "dice_distance");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    inter += double(mask[i]) * double(pv[i]);
    total += double(mask[i]) + double(pv[i]);
  }
  const double num = 2.0 * inter + smooth, den = total + smooth;
  const std::size_t pid = p.id();
  return p.tape().push(OpKind::DiceDistance, {pid}, Tensor<T>::scalar(T(num / den)),
                       [pid, mask, num, den](Tape<T>& tape, std::size_t self) {
                         if (!tape.wants_grad(pid)) return;
                         const double g = double(tape.node(self).grad[0]);
                         Tensor<T>& gp = tape.grad_buffer(pid);
                         const double inv = 1.0 / (den * den);
                         for (std::size_t i = 0; i < gp.size(); ++i)
                           gp[i] += T(g * (2.0 * double(mask[i]) * den - num) * inv);
                       });
}

/// Per-class weights r_l of the loss. A single class uses r = 1.
struct ClassWeights {
  std::vector<double> r;

  static ClassWeights uniform(std::size_t classes) { return {std::vector<double>(classes, 1.0)}; }

  /// Foreground-pixel frequency of each class over a minibatch of [classes,R,R]
  /// masks; classes absent from the batch keep r = 1.
  template <typename T>
  static ClassWeights from_frequency(const std::vector<Tensor<T>>& masks) {
    if (masks.empty()) throw InvalidArgument("class weights need at least one mask");
    const std::size_t classes = masks.front().dim(0), plane = masks.front().size() / classes;
    ClassWeights w{std::vector<double>(classes, 0.0)};
    double pixels = 0.0;
    for (const auto& m : masks) {
      pixels += double(plane);
      for (std::size_t l = 0; l < classes; ++l)
        for (std::size_t i = 0; i < plane; ++i) w.r[l] += double(m[l * plane + i]);
    }
    for (auto& r : w.r) r = r > 0 ? r / pixels : 1.0;
    return w;
  }
};

/// -sum_l r_l^-1 * dice_l for one context output [classes,R,R].
template <typename T>
Var<T> context_loss(const Var<T>& output, const Tensor<T>& mask, const ClassWeights& w) {
  require_same_grid(output.value(), mask, "loss");
  const std::size_t classes = output.shape()[0];
  if (w.r.size() != classes) throw InvalidArgument("class weight count does not match output classes");
  std::vector<Var<T>> terms;
  const std::size_t plane = mask.size() / classes;
  for (std::size_t l = 0; l < classes; ++l) {
    if (!(w.r[l] > 0)) throw InvalidArgument("class weights must be positive");
    Var<T> p = classes == 1 ? output : slice_leading(output, l, 1);
    Tensor<T> m = classes == 1 ? mask
                               : Tensor<T>(p.shape(), std::vector<T>(mask.data() + l * plane, mask.data() + (l + 1) * plane));
    terms.push_back(scale(dice_distance(p, m), T(-1.0 / w.r[l])));
  }
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

/// Minibatch loss: context losses averaged over the batch.
template <typename T>
Var<T> batch_loss(const std::vector<Var<T>>& outputs, const std::vector<Tensor<T>>& masks, const ClassWeights& w) {
  if (outputs.empty()) throw InvalidArgument("loss of an empty batch");
  if (outputs.size() != masks.size()) throw InvalidArgument("loss needs one mask per output");
  std::vector<Var<T>> terms;
  for (std::size_t i = 0; i < outputs.size(); ++i) terms.push_back(context_loss(outputs[i], masks[i], w));
  return scale(terms.size() == 1 ? terms.front() : add_n(terms), T(1.0 / double(outputs.size())));
}

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t t = 0;

  static AdamState zeros_like(const NetworkParams<T>& params) {
    AdamState s;
    for (const auto& e : params) {
      s.m.push_back(Tensor<T>::zeros(e.value.shape()));
      s.v.push_back(Tensor<T>::zeros(e.value.shape()));
    }
    return s;
  }
};

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
template <typename T>
void adam_step(NetworkParams<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& s, const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw InvalidArgument("gradient count does not match parameter count");
  if (s.m.empty()) s = AdamState<T>::zeros_like(params);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (grads[k].shape() != params[k].value.shape())
      throw InvalidArgument("gradient shape mismatch for " + params[k].name);
    for (std::size_t i = 0; i < grads[k].size(); ++i)
      if (!std::isfinite(double(grads[k][i])))
        throw NumericFailure("non-finite gradient in " + params[k].name + " at index " + std::to_string(i));
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(s.t));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    Tensor<T>& p = params[k].value;
    Tensor<T>& m = s.m[k];
    Tensor<T>& v = s.v[k];
    const Tensor<T>& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = double(g[i]);
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      p[i] = T(double(p[i]) - cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
    }
  }
}

/// Patience counter on a monitored loss. An epoch improves when the loss
/// drops by at least min_delta below the best so far.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  bool update(double loss) {
    ++epoch_;
    if (loss < best_ - min_delta_ || epoch_ == 1) {
      best_ = loss;
      best_epoch_ = epoch_;
      wait_ = 0;
      return true;
    }
    ++wait_;
    return false;
  }

  bool should_stop() const { return wait_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t wait_ = 0;
};

/// One context and the centre-slice target.
template <typename T>
struct TrainingSample {
  std::string scan_id;
  std::size_t center = 0;
  Tensor<T> context;  // [o,1,R,R]
  Tensor<T> target;   // [classes,R,R]
};

/// Training contexts of a prepared scan: centres within the organ slice
/// range, members fully inside the volume.
template <typename T>
std::vector<TrainingSample<T>> make_samples(const PreparedScan& s, std::size_t o, double d_mm,
                                            ContextMode mode = ContextMode::Training) {
  if (s.masks.empty()) throw InvalidArgument("scan " + s.id + " has no ground truth");
  std::vector<TrainingSample<T>> out;
  const std::size_t R = s.resolution();
  for (const auto& c : extract_contexts(s.id, s.depth(), s.spacing.thickness, s.organ, o, d_mm, mode))
    out.push_back({s.id, c.center, context_tensor(s, c).template cast<T>(), s.masks[c.center].reshaped({1, R, R}).template cast<T>()});
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::string out = "epoch,train_loss,val_loss,wall_time\n";
  char buf[160];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", r.epoch, r.train_loss, r.val_loss, r.wall_seconds);
    out += buf;
  }
  return out;
}

template <typename T>
struct FitResult {
  NetworkParams<T> best;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;
  std::vector<EpochRecord> history;
  bool stopped_early = false;
};

template <typename T>
struct FitCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the network holding the new best parameters.
  std::function<void(const Network<T>&, const EpochRecord&)> on_improvement;
};

/// Mean loss of a sample set with the current parameters (no gradients).
template <typename T>
double mean_loss(const Network<T>& net, const std::vector<TrainingSample<T>>& samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  const ClassWeights w = ClassWeights::uniform(net.config.classes);
  std::vector<double> losses(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    Tape<T> tape(false);
    BoundParams<T> p = bind_params(tape, net.params);
    Var<T> out = forward_context(net, p, detail::context_leaves(tape, net.config, samples[i].context));
    losses[i] = double(context_loss(out, samples[i].target, w).value()[0]);
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / double(losses.size());
}

/// Minibatch Adam training with early stopping. On return net holds the
/// parameters of the best monitored epoch (validation loss, or training loss
/// when there is no validation set).
template <typename T>
FitResult<T> fit(Network<T>& net, const std::vector<TrainingSample<T>>& train, const std::vector<TrainingSample<T>>& val,
                 const TrainConfig& cfg, const FitCallbacks<T>& callbacks = {}) {
  cfg.validate();
  if (train.empty()) throw InvalidArgument("training set is empty");
  FitResult<T> result;
  result.best = net.params;
  AdamState<T> adam = AdamState<T>::zeros_like(net.params);
  EarlyStopping stopper(cfg.patience, cfg.min_delta);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t bn = std::min(cfg.batch_size, order.size() - b0);
      std::vector<Tensor<T>> masks;
      for (std::size_t j = 0; j < bn; ++j) masks.push_back(train[order[b0 + j]].target);
      const ClassWeights w = net.config.classes == 1 ? ClassWeights::uniform(1) : ClassWeights::from_frequency(masks);

      std::vector<std::vector<Tensor<T>>> grads(bn);
      std::vector<double> losses(bn);
      parallel_for(bn, [&](std::size_t j) {
        const TrainingSample<T>& s = train[order[b0 + j]];
        Tape<T> tape;
        BoundParams<T> p = bind_params(tape, net.params);
        Var<T> out = forward_context(net, p, detail::context_leaves(tape, net.config, s.context));
        Var<T> loss = scale(context_loss(out, s.target, w), T(1.0 / double(bn)));
        tape.backward(loss);
        losses[j] = double(loss.value()[0]) * double(bn);
        for (const auto& v : p.vars) {
          const Tensor<T>* g = tape.grad(v);
          grads[j].push_back(g ? *g : Tensor<T>::zeros(v.shape()));
        }
      });
      double batch = 0.0;
      for (double l : losses) batch += l;
      if (!std::isfinite(batch)) {
        net.params = result.best;
        throw NumericFailure("non-finite loss in epoch " + std::to_string(epoch) + "; parameters reset to best epoch " +
                             std::to_string(result.best_epoch));
      }
      epoch_loss += batch;
      // Summed in batch order so the result does not depend on thread timing.
      std::vector<Tensor<T>> total = std::move(grads[0]);
      for (std::size_t j = 1; j < bn; ++j)
        for (std::size_t k = 0; k < total.size(); ++k)
          for (std::size_t i = 0; i < total[k].size(); ++i) total[k][i] += grads[j][k][i];
      try {
        adam_step(net.params, total, adam, cfg);
      } catch (const NumericFailure&) {
        net.params = result.best;
        throw;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / double(train.size());
    rec.val_loss = mean_loss(net, val);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    const double monitored = val.empty() ? rec.train_loss : rec.val_loss;
    if (!std::isfinite(monitored)) {
      net.params = result.best;
      throw NumericFailure("non-finite monitored loss in epoch " + std::to_string(epoch));
    }
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
    if (stopper.update(monitored)) {
      result.best = net.params;
      result.best_epoch = epoch;
      result.best_loss = monitored;
      if (callbacks.on_improvement) callbacks.on_improvement(net, rec);
    }
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  net.params = result.best;
  return result;
}

}  // namespace sensor3d
