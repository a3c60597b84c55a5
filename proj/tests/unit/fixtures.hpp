#pragma once

// Shape builders shared by the unit and acceptance suites.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "gripgen/voxelgrid.hpp"

namespace fixtures {

using gripgen::voxelgrid::Dims;
using gripgen::voxelgrid::GridGeometry;
using gripgen::voxelgrid::OccupancyGrid;
using gripgen::voxelgrid::TsdfVolume;

inline OccupancyGrid grid_where(Dims d, const std::function<bool(int, int, int)>& inside) {
  OccupancyGrid g(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) g.set(i, j, k, inside(i, j, k));
  return g;
}

inline TsdfVolume volume_where(int n, const std::function<bool(int, int, int)>& inside) {
  const GridGeometry geo = GridGeometry::cube(n);
  return gripgen::voxelgrid::signed_distance(grid_where(geo.dims, inside), geo);
}

/// Axis-aligned box of voxels [lo, hi) per axis.
inline TsdfVolume box_volume(int n, std::array<int, 3> lo, std::array<int, 3> hi) {
  return volume_where(n, [=](int i, int j, int k) {
    return i >= lo[0] && i < hi[0] && j >= lo[1] && j < hi[1] && k >= lo[2] && k < hi[2];
  });
}

/// Analytic sphere TSDF (distance in voxels / 5) centered at voxel coordinates c.
inline TsdfVolume sphere_volume(int n, double radius, std::array<double, 3> c) {
  TsdfVolume v(GridGeometry::cube(n));
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double d = std::sqrt((i + 0.5 - c[0]) * (i + 0.5 - c[0]) + (j + 0.5 - c[1]) * (j + 0.5 - c[1]) +
                                   (k + 0.5 - c[2]) * (k + 0.5 - c[2])) -
                         radius;
        v.set(i, j, k, static_cast<float>(d / 5.0));
      }
  return v;
}

/// Upright cylinder (axis z through the volume center) from z0 to z1.
inline TsdfVolume cylinder_volume(int n, double radius, double z0, double z1) {
  TsdfVolume v(GridGeometry::cube(n));
  const double c = 0.5 * n;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double r = std::hypot(i + 0.5 - c, j + 0.5 - c) - radius;
        const double h = std::max(z0 - (k + 0.5), (k + 0.5) - z1);
        const double d = std::max(r, h) > 0 ? std::hypot(std::max(r, 0.0), std::max(h, 0.0)) : std::max(r, h);
        v.set(i, j, k, static_cast<float>(d / 5.0));
      }
  return v;
}

inline TsdfVolume random_volume(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  TsdfVolume v(GridGeometry::cube(n));
  for (float& x : v.values()) x = u(rng);
  return v;
}

inline OccupancyGrid random_grid(Dims d, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(p);
  OccupancyGrid g(d);
  for (std::size_t i = 0; i < d.count(); ++i) g.set_index(i, b(rng));
  return g;
}

}  // namespace fixtures
