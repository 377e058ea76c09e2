#pragma once

// Spatial contexts (o slices centred on slice k, neighbours a fixed physical
// step apart) and scan-level dataset splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/volume.hpp"

namespace sensor3d {

struct SpatialContext {
  std::string scan_id;
  std::size_t center = 0;
  std::vector<std::size_t> members;
  double step_mm = 0.0;
};

enum class ContextMode { Training, Inference };

/// Slice step for a physical distance: the neighbour is taken at the slice
/// at least d_mm away (ceiling), never closer than the adjacent slice.
inline std::size_t step_in_slices(double d_mm, double thickness) {
  if (!(d_mm > 0) || !(thickness > 0)) throw InvalidArgument("context distance and slice thickness must be positive");
  const double s = std::ceil(d_mm / thickness - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(s));
}

struct SliceRange {
  std::size_t first = 0;
  std::size_t last = 0;  // inclusive
};

/// First and last slice containing foreground, or nothing for an empty mask.
inline std::optional<SliceRange> organ_slice_range(const MaskVolume& m) {
  std::optional<SliceRange> r;
  for (std::size_t k = 0; k < m.depth(); ++k)
    if (m.foreground(k)) {
      if (!r) r = SliceRange{k, k};
      r->last = k;
    }
  return r;
}

/// Contexts for every centre slice of range in a volume of the given depth.
/// Training drops contexts that would reach outside the volume; inference
/// clamps members to the nearest valid slice.
inline std::vector<SpatialContext> extract_contexts(const std::string& scan_id, std::size_t depth, double thickness,
                                                    std::optional<SliceRange> range, std::size_t o, double d_mm,
                                                    ContextMode mode) {
  if (o == 0 || o % 2 == 0) throw InvalidArgument("context length o must be odd, got " + std::to_string(o));
  const std::size_t s = step_in_slices(d_mm, thickness);
  std::vector<SpatialContext> out;
  if (!range || depth == 0) return out;
  if (range->first > range->last || range->last >= depth) throw InvalidArgument("slice range outside volume");
  const long long half = static_cast<long long>((o - 1) / 2);
  for (std::size_t k = range->first; k <= range->last; ++k) {
    SpatialContext c{scan_id, k, {}, d_mm};
    bool inside = true;
    for (long long j = -half; j <= half; ++j) {
      long long idx = static_cast<long long>(k) + j * static_cast<long long>(s);
      if (idx < 0 || idx >= static_cast<long long>(depth)) {
        inside = false;
        idx = std::clamp<long long>(idx, 0, static_cast<long long>(depth) - 1);
      }
      c.members.push_back(static_cast<std::size_t>(idx));
    }
    if (!inside && mode == ContextMode::Training) continue;
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<SpatialContext> extract_contexts(const std::string& scan_id, const Volume& v,
                                                    std::optional<SliceRange> range, std::size_t o, double d_mm,
                                                    ContextMode mode) {
  return extract_contexts(scan_id, v.depth(), v.spacing.thickness, range, o, d_mm, mode);
}

struct SplitSpec {
  std::size_t folds = 2;
  std::size_t test_fold = 0;
  double validation_fraction = 0.1;
  /// Explicit fold membership; when non-empty it replaces the seeded split.
  std::vector<std::vector<std::string>> explicit_folds;
};

struct DataSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

/// Assigns scans (never individual contexts) to train / validation / test.
/// The validation share is carved out of the training scans; it is at least
/// one scan when two or more training scans remain.
inline DataSplit split_by_scan(const std::vector<std::string>& ids, const SplitSpec& spec, std::uint64_t seed) {
  std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) throw InvalidArgument("duplicate scan id in split input");
  std::vector<std::vector<std::string>> folds;
  if (!spec.explicit_folds.empty()) {
    std::set<std::string> seen;
    for (const auto& f : spec.explicit_folds)
      for (const auto& id : f) {
        if (!unique.count(id)) throw InvalidArgument("fold lists unknown scan " + id);
        if (!seen.insert(id).second) throw InvalidArgument("scan " + id + " appears in more than one fold");
      }
    folds = spec.explicit_folds;
  } else {
    if (spec.folds == 0) throw InvalidArgument("need at least one fold");
    std::vector<std::string> order(ids);
    std::sort(order.begin(), order.end());
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    folds.assign(spec.folds, {});
    for (std::size_t i = 0; i < order.size(); ++i) folds[i % spec.folds].push_back(order[i]);
  }
  if (spec.test_fold >= folds.size()) throw InvalidArgument("test fold " + std::to_string(spec.test_fold) + " does not exist");
  if (spec.validation_fraction < 0 || spec.validation_fraction >= 1) throw InvalidArgument("validation fraction must be in [0,1)");

  DataSplit split;
  split.test = folds[spec.test_fold];
  std::vector<std::string> rest;
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != spec.test_fold) rest.insert(rest.end(), folds[f].begin(), folds[f].end());
  if (folds.size() == 1) rest.clear();
  std::sort(rest.begin(), rest.end());
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(rest.begin(), rest.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::lround(spec.validation_fraction * double(rest.size())));
  if (spec.validation_fraction > 0 && n_val == 0 && rest.size() >= 2) n_val = 1;
  if (n_val >= rest.size()) n_val = rest.empty() ? 0 : rest.size() - 1;
  split.validation.assign(rest.begin(), rest.begin() + static_cast<long>(n_val));
  split.train.assign(rest.begin() + static_cast<long>(n_val), rest.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace sensor3d
