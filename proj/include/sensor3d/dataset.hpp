#pragma once

// Dataset directories (manifest + volume/mask files) and scans prepared for
// the network: every slice downsampled to R x R and preprocessed once.

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sensor3d/contexts.hpp"
#include "sensor3d/parallel.hpp"
#include "sensor3d/preprocess.hpp"
#include "sensor3d/volume.hpp"

namespace sensor3d {

struct ScanRecord {
  std::string id;
  std::string volume;  // relative to the manifest directory
  std::string mask;    // may be empty
  Shape dims;
  Spacing spacing;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ScanRecord> scans;

  const ScanRecord& find(const std::string& id) const {
    for (const auto& s : scans)
      if (s.id == id) return s;
    throw InvalidArgument("manifest has no scan '" + id + "'");
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& s : scans) out.push_back(s.id);
    return out;
  }
  std::string volume_path(const ScanRecord& s) const { return (root / s.volume).string(); }
  std::string mask_path(const ScanRecord& s) const { return s.mask.empty() ? std::string() : (root / s.mask).string(); }
};

inline void write_manifest(const std::filesystem::path& path, const std::vector<ScanRecord>& scans) {
  nlohmann::ordered_json j;
  j["format"] = "sensor3d-dataset";
  j["scans"] = nlohmann::ordered_json::array();
  for (const auto& s : scans) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    e["volume"] = s.volume;
    e["mask"] = s.mask;
    e["dims"] = s.dims;
    e["spacing"] = {s.spacing.thickness, s.spacing.row, s.spacing.col};
    j["scans"].push_back(e);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  try {
    auto j = nlohmann::json::parse(in);
    for (const auto& e : j.at("scans")) {
      ScanRecord s;
      s.id = e.at("id").get<std::string>();
      s.volume = e.at("volume").get<std::string>();
      s.mask = e.value("mask", std::string());
      s.dims = e.at("dims").get<Shape>();
      auto sp = e.at("spacing").get<std::vector<double>>();
      if (sp.size() != 3) throw MalformedFile("spacing needs three values");
      s.spacing = {sp[0], sp[1], sp[2]};
      m.scans.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MalformedFile(path.string() + ": " + e.what());
  }
  return m;
}

struct PrepOptions {
  std::size_t resolution = 128;
  Window window{};
  ClaheParams clahe{};
};

/// One scan after downsampling and preprocessing.
struct PreparedScan {
  std::string id;
  Spacing spacing;
  std::size_t native_height = 0;
  std::size_t native_width = 0;
  std::vector<Tensor<float>> slices;       // [R,R], preprocessed
  std::vector<Tensor<float>> masks;        // [R,R], 0/1; empty without ground truth
  std::optional<MaskVolume> native_mask;   // ground truth at native resolution
  std::optional<SliceRange> organ;

  std::size_t depth() const { return slices.size(); }
  std::size_t resolution() const { return slices.empty() ? 0 : slices.front().dim(0); }
};

inline PreparedScan prepare_scan(const std::string& id, const Volume& v, const std::optional<MaskVolume>& mask,
                                 const PrepOptions& opt) {
  v.validate();
  if (mask) require_paired(v, *mask);
  PreparedScan s;
  s.id = id;
  s.spacing = v.spacing;
  s.native_height = v.height();
  s.native_width = v.width();
  s.slices.resize(v.depth());
  parallel_for(v.depth(), [&](std::size_t k) {
    s.slices[k] = preprocess_slice(resample_inplane(v.slice(k), opt.resolution, ResampleKind::Intensity), opt.window, opt.clahe);
  });
  if (mask) {
    s.masks.resize(v.depth());
    for (std::size_t k = 0; k < v.depth(); ++k)
      s.masks[k] = resample_inplane(mask_to_float(mask->slice(k)), opt.resolution, ResampleKind::Mask);
    s.native_mask = mask;
    s.organ = organ_slice_range(*mask);
  }
  return s;
}

inline PreparedScan load_prepared(const Manifest& m, const std::string& id, const PrepOptions& opt) {
  const ScanRecord& r = m.find(id);
  auto [vol, mask] = load_volume(m.volume_path(r), m.mask_path(r));
  return prepare_scan(id, vol, mask, opt);
}

/// Stacks the member slices of a context into [o,1,R,R].
inline Tensor<float> context_tensor(const PreparedScan& s, const SpatialContext& c) {
  const std::size_t R = s.resolution(), n = R * R;
  Tensor<float> out({c.members.size(), 1, R, R});
  for (std::size_t t = 0; t < c.members.size(); ++t)
    std::copy(s.slices.at(c.members[t]).data(), s.slices.at(c.members[t]).data() + n, out.data() + t * n);
  return out;
}

}  // namespace sensor3d
