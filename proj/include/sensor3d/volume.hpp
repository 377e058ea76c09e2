#pragma once

// Scan volumes and their label masks, plus the on-disk format:
//
//   dims=D,H,W
//   spacing=sz,sy,sx
//   dtype=f32            (i16 also accepted for intensities, u8 for masks)
//   <blank line>
//   row-major little-endian payload
//
// Spacing is (slice thickness, row, column) in millimetres.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/tensor.hpp"

namespace sensor3d {

struct Spacing {
  double thickness = 1.0;
  double row = 1.0;
  double col = 1.0;
  bool operator==(const Spacing&) const = default;
};

struct Volume {
  Tensor<float> voxels;  // [D, H, W]
  Spacing spacing;

  std::size_t depth() const { return voxels.dim(0); }
  std::size_t height() const { return voxels.dim(1); }
  std::size_t width() const { return voxels.dim(2); }

  Tensor<float> slice(std::size_t k) const {
    if (k >= depth()) throw InvalidArgument("slice index " + std::to_string(k) + " outside volume of depth " + std::to_string(depth()));
    const std::size_t n = height() * width();
    return Tensor<float>({height(), width()}, std::vector<float>(voxels.data() + k * n, voxels.data() + (k + 1) * n));
  }

  void validate() const {
    if (voxels.rank() != 3 || voxels.dim(0) == 0 || voxels.dim(1) == 0 || voxels.dim(2) == 0)
      throw InvalidArgument("volume must be [D,H,W] with D,H,W >= 1, got " + shape_str(voxels.shape()));
    if (!(spacing.thickness > 0 && spacing.row > 0 && spacing.col > 0))
      throw InvalidArgument("volume spacing components must be strictly positive");
  }
};

struct MaskVolume {
  Tensor<std::uint8_t> labels;  // [D, H, W], values 0/1

  std::size_t depth() const { return labels.dim(0); }
  std::size_t height() const { return labels.dim(1); }
  std::size_t width() const { return labels.dim(2); }

  Tensor<std::uint8_t> slice(std::size_t k) const {
    if (k >= depth()) throw InvalidArgument("mask slice index " + std::to_string(k) + " outside depth " + std::to_string(depth()));
    const std::size_t n = height() * width();
    return Tensor<std::uint8_t>({height(), width()},
                                std::vector<std::uint8_t>(labels.data() + k * n, labels.data() + (k + 1) * n));
  }

  std::size_t foreground(std::size_t k) const {
    const std::size_t n = height() * width();
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c += labels.data()[k * n + i] != 0;
    return c;
  }
};

inline void require_paired(const Volume& v, const MaskVolume& m) {
  if (v.voxels.shape() != m.labels.shape())
    throw InvalidArgument("mask dims " + shape_str(m.labels.shape()) + " differ from volume dims " + shape_str(v.voxels.shape()));
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "volume payloads are read in place as little-endian");

struct VolumeHeader {
  Shape dims;
  Spacing spacing;
  std::string dtype;
};

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(part);
  return out;
}

inline VolumeHeader read_volume_header(std::istream& in, const std::string& path) {
  VolumeHeader h;
  bool have_dims = false, have_spacing = false;
  std::string line;
  auto bad = [&](const std::string& why) { return MalformedFile(path + ": " + why); };
  while (true) {
    if (!std::getline(in, line)) throw bad("header not terminated by a blank line");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("header line without '=': " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "dims") {
        auto parts = split_commas(value);
        if (parts.size() != 3) throw bad("dims needs three values");
        for (const auto& p : parts) {
          std::size_t used = 0;
          const long long v = std::stoll(p, &used);
          if (used != p.size() || v <= 0) throw bad("dims must be positive integers");
          h.dims.push_back(static_cast<std::size_t>(v));
        }
        have_dims = true;
      } else if (key == "spacing") {
        auto parts = split_commas(value);
        if (parts.size() != 3) throw bad("spacing needs three values");
        h.spacing = {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
        if (!(h.spacing.thickness > 0 && h.spacing.row > 0 && h.spacing.col > 0))
          throw bad("spacing must be strictly positive");
        have_spacing = true;
      } else if (key == "dtype") {
        if (value != "f32" && value != "i16" && value != "u8") throw bad("unsupported dtype " + value);
        h.dtype = value;
      } else {
        throw bad("unknown header key " + key);
      }
    } catch (const std::logic_error&) {
      throw bad("unparsable value in line: " + line);
    }
  }
  if (!have_dims || !have_spacing || h.dtype.empty()) throw bad("header needs dims, spacing and dtype");
  return h;
}

template <typename Raw>
std::vector<Raw> read_payload(std::istream& in, std::size_t count, const std::string& path) {
  std::vector<Raw> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(Raw)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(Raw))
    throw TruncatedFile(path + ": payload holds " + std::to_string(in.gcount()) + " bytes, header implies " +
                        std::to_string(count * sizeof(Raw)));
  return raw;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return in;
}

inline void write_header(std::ostream& out, const Shape& dims, const Spacing& s, const char* dtype) {
  std::ostringstream h;
  h.precision(17);
  h << "dims=" << dims[0] << ',' << dims[1] << ',' << dims[2] << '\n'
    << "spacing=" << s.thickness << ',' << s.row << ',' << s.col << '\n'
    << "dtype=" << dtype << "\n\n";
  out << h.str();
}

}  // namespace detail

inline Volume read_volume(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  detail::VolumeHeader h = detail::read_volume_header(in, path);
  const std::size_t n = shape_numel(h.dims);
  Volume v{Tensor<float>(h.dims), h.spacing};
  if (h.dtype == "f32") {
    auto raw = detail::read_payload<float>(in, n, path);
    std::copy(raw.begin(), raw.end(), v.voxels.data());
  } else if (h.dtype == "i16") {
    auto raw = detail::read_payload<std::int16_t>(in, n, path);
    std::transform(raw.begin(), raw.end(), v.voxels.data(), [](std::int16_t x) { return float(x); });
  } else {
    throw MalformedFile(path + ": intensity volume cannot have dtype " + h.dtype);
  }
  return v;
}

inline MaskVolume read_mask(const std::string& path, Spacing* spacing = nullptr) {
  std::ifstream in = detail::open_in(path);
  detail::VolumeHeader h = detail::read_volume_header(in, path);
  if (h.dtype != "u8") throw MalformedFile(path + ": mask must have dtype u8, got " + h.dtype);
  auto raw = detail::read_payload<std::uint8_t>(in, shape_numel(h.dims), path);
  for (auto b : raw)
    if (b > 1) throw MalformedFile(path + ": mask values must be 0 or 1");
  if (spacing) *spacing = h.spacing;
  return MaskVolume{Tensor<std::uint8_t>(h.dims, std::move(raw))};
}

/// Reads an intensity volume and, when a mask path is given, its label mask.
inline std::pair<Volume, std::optional<MaskVolume>> load_volume(const std::string& path,
                                                                const std::string& mask_path = {}) {
  Volume v = read_volume(path);
  std::optional<MaskVolume> m;
  if (!mask_path.empty()) {
    m = read_mask(mask_path);
    require_paired(v, *m);
  }
  return {std::move(v), std::move(m)};
}

inline void write_volume(const std::string& path, const Volume& v) {
  v.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  detail::write_header(out, v.voxels.shape(), v.spacing, "f32");
  out.write(reinterpret_cast<const char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path);
}

inline void write_mask(const std::string& path, const MaskVolume& m, const Spacing& spacing) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  detail::write_header(out, m.labels.shape(), spacing, "u8");
  out.write(reinterpret_cast<const char*>(m.labels.data()), static_cast<std::streamsize>(m.labels.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace sensor3d
