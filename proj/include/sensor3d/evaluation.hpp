#pragma once

// Thresholded predictions, Dice / VOE per scan in two regimes (organ slices
// only, whole volume), report tables and the Wilcoxon signed-rank test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "sensor3d/contexts.hpp"
#include "sensor3d/dataset.hpp"
#include "sensor3d/network.hpp"
#include "sensor3d/parallel.hpp"
#include "sensor3d/preprocess.hpp"

namespace sensor3d {

constexpr double kForegroundEpsilon = 0.25;

/// Pixels with |p - 1| < epsilon.
template <typename T>
Tensor<std::uint8_t> threshold_prediction(const Tensor<T>& p, double epsilon = kForegroundEpsilon) {
  Tensor<std::uint8_t> out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = std::abs(double(p[i]) - 1.0) < epsilon ? 1 : 0;
  return out;
}

struct Overlap {
  double dice = 1.0;
  double voe = 0.0;
};

inline double voe_from_dice(double d) { return 2.0 * (1.0 - d) / (2.0 - d); }

/// Two empty sets agree perfectly.
inline Overlap overlap_from_counts(std::size_t intersection, std::size_t pred, std::size_t truth) {
  if (pred + truth == 0) return {1.0, 0.0};
  const double d = 2.0 * double(intersection) / double(pred + truth);
  return {d, voe_from_dice(d)};
}

inline Overlap dice_and_voe(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth) {
  if (pred.shape() != truth.shape())
    throw InvalidArgument("prediction grid " + shape_str(pred.shape()) + " differs from ground truth " + shape_str(truth.shape()));
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] && truth[i];
    a += pred[i] != 0;
    b += truth[i] != 0;
  }
  return overlap_from_counts(inter, a, b);
}

enum class Regime { OrganArea, FullVolume };

inline std::string to_string(Regime r) { return r == Regime::OrganArea ? "organ-area" : "full-volume"; }

/// Overlap over the regime's slices. Organ area restricts prediction and
/// ground truth alike to the ground-truth slice range.
inline Overlap score_volume(const Tensor<std::uint8_t>& pred, const MaskVolume& truth, Regime regime) {
  if (pred.shape() != truth.labels.shape())
    throw InvalidArgument("prediction volume " + shape_str(pred.shape()) + " differs from mask " + shape_str(truth.labels.shape()));
  std::size_t first = 0, last = truth.depth();
  if (regime == Regime::OrganArea) {
    auto r = organ_slice_range(truth);
    if (!r) return overlap_from_counts(0, 0, 0);
    first = r->first;
    last = r->last + 1;
  }
  const std::size_t plane = truth.height() * truth.width();
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = first * plane; i < last * plane; ++i) {
    inter += pred[i] && truth.labels[i];
    a += pred[i] != 0;
    b += truth.labels[i] != 0;
  }
  return overlap_from_counts(inter, a, b);
}

/// Foreground probability (class 0) of every slice at network resolution,
/// with contexts clamped at the volume ends.
template <typename T>
std::vector<Tensor<float>> predict_volume(const Network<T>& net, const PreparedScan& scan, double d_mm) {
  if (scan.resolution() != net.config.resolution)
    throw ConfigMismatch("scan prepared at " + std::to_string(scan.resolution()) + " but network expects " +
                         std::to_string(net.config.resolution));
  auto contexts = extract_contexts(scan.id, scan.depth(), scan.spacing.thickness, SliceRange{0, scan.depth() - 1},
                                   net.config.sequence_length, d_mm, ContextMode::Inference);
  std::vector<Tensor<float>> out(contexts.size());
  const std::size_t R = net.config.resolution;
  parallel_for(contexts.size(), [&](std::size_t i) {
    Tensor<T> p = predict_context(net, context_tensor(scan, contexts[i]).template cast<T>());
    out[i] = Tensor<float>({R, R}, std::vector<float>(p.data(), p.data() + R * R));
  });
  return out;
}

/// Thresholds each probability slice at network resolution and brings the
/// binary mask back to the native grid.
inline Tensor<std::uint8_t> native_prediction(const std::vector<Tensor<float>>& probabilities, std::size_t height,
                                              std::size_t width, double epsilon = kForegroundEpsilon) {
  if (height != width) throw InvalidArgument("native slices must be square for resampling");
  Tensor<std::uint8_t> out({probabilities.size(), height, width});
  const std::size_t plane = height * width;
  for (std::size_t k = 0; k < probabilities.size(); ++k) {
    Tensor<float> bin = threshold_prediction(probabilities[k], epsilon).template cast<float>();
    Tensor<float> up = resample_inplane(bin, height, ResampleKind::Mask);
    for (std::size_t i = 0; i < plane; ++i) out[k * plane + i] = up[i] != 0.0f;
  }
  return out;
}

struct EvalRow {
  std::string scan;
  Overlap organ;
  Overlap full;
};

inline EvalRow evaluate_prediction(const std::string& scan, const Tensor<std::uint8_t>& pred, const MaskVolume& truth) {
  return {scan, score_volume(pred, truth, Regime::OrganArea), score_volume(pred, truth, Regime::FullVolume)};
}

template <typename T>
EvalRow evaluate_volume(const Network<T>& net, const PreparedScan& scan, double d_mm, double epsilon = kForegroundEpsilon) {
  if (!scan.native_mask) throw InvalidArgument("scan " + scan.id + " has no ground truth to evaluate against");
  auto prob = predict_volume(net, scan, d_mm);
  return evaluate_prediction(scan.id, native_prediction(prob, scan.native_height, scan.native_width, epsilon), *scan.native_mask);
}

struct EvalReport {
  std::string model;
  std::vector<EvalRow> rows;

  /// Arithmetic mean over scans.
  Overlap mean(Regime r) const {
    Overlap m{0.0, 0.0};
    if (rows.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    for (const auto& row : rows) {
      const Overlap& o = r == Regime::OrganArea ? row.organ : row.full;
      m.dice += o.dice;
      m.voe += o.voe;
    }
    m.dice /= double(rows.size());
    m.voe /= double(rows.size());
    return m;
  }

  std::vector<double> dice(Regime r) const {
    std::vector<double> out;
    for (const auto& row : rows) out.push_back(r == Regime::OrganArea ? row.organ.dice : row.full.dice);
    return out;
  }
};

inline std::string report_csv(const std::vector<EvalReport>& reports) {
  std::string out = "model,scan,regime,dice,voe\n";
  char buf[256];
  for (const auto& rep : reports) {
    for (Regime r : {Regime::OrganArea, Regime::FullVolume}) {
      for (const auto& row : rep.rows) {
        const Overlap& o = r == Regime::OrganArea ? row.organ : row.full;
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%.9f,%.9f\n", rep.model.c_str(), row.scan.c_str(), to_string(r).c_str(), o.dice, o.voe);
        out += buf;
      }
      const Overlap m = rep.mean(r);
      std::snprintf(buf, sizeof buf, "%s,mean,%s,%.9f,%.9f\n", rep.model.c_str(), to_string(r).c_str(), m.dice, m.voe);
      out += buf;
    }
  }
  return out;
}

/// Aligned text table, scores in percent: one line per model with
/// Organ Area D / VOE and Full Volume D / VOE.
inline std::string report_table(const std::vector<EvalReport>& reports) {
  std::size_t w = 5;
  for (const auto& r : reports) w = std::max(w, r.model.size());
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-*s | %-13s | %-13s\n", int(w), "Model", "Organ Area", "Full Volume");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-*s | %5s  %5s  | %5s  %5s\n", int(w), "", "D", "VOE", "D", "VOE");
  out += buf;
  out += std::string(w, '-') + "-+---------------+--------------\n";
  for (const auto& r : reports) {
    const Overlap a = r.mean(Regime::OrganArea), b = r.mean(Regime::FullVolume);
    std::snprintf(buf, sizeof buf, "%-*s | %5.1f  %5.1f  | %5.1f  %5.1f\n", int(w), r.model.c_str(), 100 * a.dice, 100 * a.voe,
                  100 * b.dice, 100 * b.voe);
    out += buf;
  }
  return out;
}

namespace detail {

// Ranks of |d| (ties averaged), doubled so they are integers.
inline std::vector<long> doubled_ranks(const std::vector<double>& abs_diff) {
  const std::size_t n = abs_diff.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return abs_diff[a] < abs_diff[b]; });
  std::vector<long> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && abs_diff[idx[j + 1]] == abs_diff[idx[i]]) ++j;
    const long doubled = long(i + 1) + long(j + 1);  // 2 * mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = doubled;
    i = j + 1;
  }
  return r;
}

}  // namespace detail

constexpr std::size_t kWilcoxonExactMax = 10;

/// Two-sided Wilcoxon signed-rank p-value for paired samples. Zero
/// differences are dropped; tied magnitudes share their average rank. Up to
/// kWilcoxonExactMax non-zero pairs the null distribution of the positive
/// rank sum is counted exactly; above that a normal approximation with tie
/// and continuity correction is used.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidArgument("wilcoxon_signed_rank needs equal-length paired samples");
  std::vector<double> mag;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw InvalidArgument("wilcoxon_signed_rank got a non-finite sample");
    if (d == 0.0) continue;
    mag.push_back(std::abs(d));
    positive.push_back(d > 0);
  }
  const std::size_t n = mag.size();
  if (n == 0) return 1.0;
  const std::vector<long> r2 = detail::doubled_ranks(mag);
  long w2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += r2[i];
    if (positive[i]) w2 += r2[i];
  }
  if (n <= kWilcoxonExactMax) {
    std::vector<double> ways(std::size_t(total2) + 1, 0.0);
    ways[0] = 1.0;
    for (long r : r2)
      for (long s = total2; s >= r; --s) ways[s] += ways[s - r];
    const double all = std::ldexp(1.0, int(n));
    double le = 0.0, ge = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (s <= w2) le += ways[s];
      if (s >= w2) ge += ways[s];
    }
    return std::min(1.0, 2.0 * std::min(le, ge) / all);
  }
  double tie_term = 0.0;
  {
    std::vector<long> sorted = r2;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && sorted[j] == sorted[i]) ++j;
      const double t = double(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
  }
  const double nn = double(n);
  const double mean = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (var <= 0) return 1.0;
  const double z = std::max(0.0, std::abs(double(w2) / 2.0 - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

/// Symmetric matrix of pairwise p-values; the diagonal is +infinity.
inline std::vector<std::vector<double>> significance_matrix(const std::vector<std::vector<double>>& dice_per_model) {
  const std::size_t m = dice_per_model.size();
  std::vector<std::vector<double>> p(m, std::vector<double>(m, std::numeric_limits<double>::infinity()));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) p[i][j] = p[j][i] = wilcoxon_signed_rank(dice_per_model[i], dice_per_model[j]);
  return p;
}

inline std::string format_p_value(double p) {
  if (std::isinf(p)) return "∞";
  if (p < 0.01) return "<0.01";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", p);
  return buf;
}

inline std::string format_significance(const std::vector<std::string>& names, const std::vector<std::vector<double>>& p) {
  if (names.size() != p.size()) throw InvalidArgument("one name per model required");
  std::size_t w = 6;
  for (const auto& n : names) w = std::max(w, n.size());
  auto cell = [&](const std::string& s) {
    // "∞" is three bytes but one column wide.
    const std::size_t shown = s == "∞" ? 1 : s.size();
    return std::string(w > shown ? w - shown : 0, ' ') + s;
  };
  std::string out = cell("");
  for (const auto& n : names) out += " | " + cell(n);
  out += '\n';
  for (std::size_t i = 0; i < names.size(); ++i) {
    out += cell(names[i]);
    for (std::size_t j = 0; j < names.size(); ++j) out += " | " + cell(format_p_value(p[i][j]));
    out += '\n';
  }
  return out;
}

inline std::string significance_csv(const std::vector<std::string>& names, const std::vector<std::vector<double>>& p) {
  std::string out = "model";
  for (const auto& n : names) out += "," + n;
  out += '\n';
  char buf[64];
  for (std::size_t i = 0; i < names.size(); ++i) {
    out += names[i];
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (std::isinf(p[i][j])) {
        out += ",inf";
      } else {
        std::snprintf(buf, sizeof buf, ",%.9g", p[i][j]);
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace sensor3d
