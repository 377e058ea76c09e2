#pragma once

// Synthetic scans for desk-scale experiments: a smooth "organ" built from a
// union of ellipsoids, brighter than a textured soft-tissue body that sits in
// air, plus Gaussian noise. The mask is exactly the ellipsoid union.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "sensor3d/errors.hpp"
#include "sensor3d/volume.hpp"

namespace sensor3d {

struct SynthConfig {
  std::size_t depth = 24;
  std::size_t height = 64;
  std::size_t width = 64;
  Spacing spacing{2.5, 1.0, 1.0};
  double min_fraction = 0.05;  // organ voxels / all voxels
  double max_fraction = 0.40;
  std::size_t ellipsoids = 3;
  float body_hu = 40.0f;
  float organ_offset_hu = 100.0f;
  float texture_hu = 25.0f;
  float noise_hu = 10.0f;

  void validate() const {
    if (depth == 0 || height == 0 || width == 0) throw InvalidArgument("synthetic dims must be positive");
    if (!(spacing.thickness > 0 && spacing.row > 0 && spacing.col > 0)) throw InvalidArgument("synthetic spacing must be positive");
    if (!(0 < min_fraction && min_fraction < max_fraction && max_fraction < 1)) throw InvalidArgument("bad organ fraction band");
    if (ellipsoids == 0) throw InvalidArgument("need at least one ellipsoid");
  }
};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> radius;
};

inline std::vector<std::uint8_t> rasterize(const std::vector<Ellipsoid>& parts, double scale, const SynthConfig& c) {
  std::vector<std::uint8_t> m(c.depth * c.height * c.width, 0);
  for (std::size_t z = 0; z < c.depth; ++z)
    for (std::size_t y = 0; y < c.height; ++y)
      for (std::size_t x = 0; x < c.width; ++x) {
        const std::array<double, 3> u{(z + 0.5) / double(c.depth), (y + 0.5) / double(c.height), (x + 0.5) / double(c.width)};
        for (const auto& e : parts) {
          double r = 0.0;
          for (int a = 0; a < 3; ++a) {
            // The slab direction never grows past 0.3 so the end slices stay organ-free.
            const double r_axis = a == 0 ? std::min(0.3, scale * e.radius[a]) : scale * e.radius[a];
            const double t = (u[a] - e.centre[a]) / r_axis;
            r += t * t;
          }
          if (r <= 1.0) {
            m[(z * c.height + y) * c.width + x] = 1;
            break;
          }
        }
      }
  return m;
}

inline double fraction(const std::vector<std::uint8_t>& m) {
  std::size_t n = 0;
  for (auto v : m) n += v;
  return double(n) / double(m.size());
}

}  // namespace detail

inline std::pair<Volume, MaskVolume> synth_one(const SynthConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);

  std::vector<detail::Ellipsoid> parts(c.ellipsoids);
  for (auto& e : parts) {
    e.centre = {0.5 + std::clamp(0.08 * N(rng), -0.1, 0.1), 0.5 + 0.08 * N(rng), 0.5 + 0.08 * N(rng)};
    e.radius = {0.2 + 0.1 * U(rng), 0.12 + 0.12 * U(rng), 0.12 + 0.12 * U(rng)};
  }
  const double target = c.min_fraction + (0.25 + 0.5 * U(rng)) * (c.max_fraction - c.min_fraction);
  double lo = 0.05, hi = 4.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (detail::fraction(detail::rasterize(parts, mid, c)) < target ? lo : hi) = mid;
  }
  std::vector<std::uint8_t> mask = detail::rasterize(parts, 0.5 * (lo + hi), c);

  // A few low-frequency plane waves give the body a texture.
  struct Wave {
    double kz, ky, kx, phase;
  };
  std::vector<Wave> waves(4);
  for (auto& w : waves) w = {2.0 * U(rng), 1.0 + 4.0 * U(rng), 1.0 + 4.0 * U(rng), 2.0 * M_PI * U(rng)};
  const double body_ry = 0.42 + 0.05 * U(rng), body_rx = 0.44 + 0.05 * U(rng);

  Tensor<float> vox({c.depth, c.height, c.width});
  for (std::size_t z = 0; z < c.depth; ++z)
    for (std::size_t y = 0; y < c.height; ++y)
      for (std::size_t x = 0; x < c.width; ++x) {
        const double uz = (z + 0.5) / double(c.depth), uy = (y + 0.5) / double(c.height), ux = (x + 0.5) / double(c.width);
        const std::size_t i = (z * c.height + y) * c.width + x;
        const double dy = (uy - 0.5) / body_ry, dx = (ux - 0.5) / body_rx;
        double v;
        if (dy * dy + dx * dx > 1.0 && !mask[i]) {
          v = -1000.0;
        } else {
          double tex = 0.0;
          for (const auto& w : waves) tex += std::sin(2.0 * M_PI * (w.kz * uz + w.ky * uy + w.kx * ux) + w.phase);
          v = c.body_hu + c.texture_hu * tex / double(waves.size()) + (mask[i] ? c.organ_offset_hu : 0.0f);
        }
        vox.data()[i] = float(v + c.noise_hu * N(rng));
      }
  return {Volume{std::move(vox), c.spacing}, MaskVolume{Tensor<std::uint8_t>({c.depth, c.height, c.width}, std::move(mask))}};
}

/// count volume/mask pairs; pair i depends only on (seed, i).
inline std::vector<std::pair<Volume, MaskVolume>> synth_generate(std::size_t count, const SynthConfig& c, std::uint64_t seed) {
  std::vector<std::pair<Volume, MaskVolume>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(i)};
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    out.push_back(synth_one(c, (std::uint64_t(words[0]) << 32) | words[1]));
  }
  return out;
}

}  // namespace sensor3d
