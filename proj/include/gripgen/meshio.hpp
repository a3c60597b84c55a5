#pragma once

// Triangle meshes extracted from TSDF volumes, with OBJ and binary STL output.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gripgen/voxelgrid.hpp"

namespace gripgen::meshio {

using voxelgrid::TsdfVolume;
using voxelgrid::Vec3;

class MeshFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vertex welding distance in meters.
inline constexpr double kWeldTolerance = 1e-6;

struct TriangleMesh {
  std::vector<Vec3> vertices;  // meters
  std::vector<std::array<std::uint32_t, 3>> triangles;
  /// Unit normal per triangle, pointing out of the solid.
  std::vector<Vec3> normals;

  bool empty() const { return triangles.empty(); }
};

/// Isosurface through voxel centers with linear edge interpolation. Values
/// below `iso` are inside, matching occupancy_from_tsdf. Vertices closer than
/// kWeldTolerance are merged and zero-area triangles dropped. Throws
/// std::invalid_argument unless iso lies in (-1, 1).
TriangleMesh marching_cubes(const TsdfVolume& v, double iso = 0.0);

/// Copy surrounded by `layers` of empty (+1) voxels, origin moved so world
/// positions are unchanged. Shapes touching the grid boundary then mesh closed.
TsdfVolume pad_exterior(const TsdfVolume& v, int layers = 1);

/// Edges used by anything other than exactly two triangles.
std::size_t non_manifold_edges(const TriangleMesh& m);
/// V - E + F.
long euler_characteristic(const TriangleMesh& m);
/// Signed volume by the divergence theorem; positive for outward winding.
double enclosed_volume(const TriangleMesh& m);

/// "v x y z" lines (%.9g) followed by 1-based "f a b c" lines.
std::string obj_text(const TriangleMesh& m);
void write_obj(const TriangleMesh& m, const std::filesystem::path& path);
/// Reads v and f records (triangles only); other records are ignored.
/// Normals are recomputed.
TriangleMesh read_obj(const std::filesystem::path& path);

/// 80-byte header, u32 count, 50 bytes per triangle, little-endian.
std::vector<std::uint8_t> stl_bytes(const TriangleMesh& m);
void write_stl(const TriangleMesh& m, const std::filesystem::path& path);

}  // namespace gripgen::meshio
