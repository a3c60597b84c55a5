#pragma once

// Dense volumetric types shared by the whole pipeline: TSDF volumes, occupancy
// grids, two-view depth fusion, connected components and rigid resampling.
//
// Voxel order everywhere is x-fastest: index = x + nx * (y + ny * z).

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gripgen::voxelgrid {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
  bool valid() const { return x > 0 && y > 0 && z > 0; }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < x && j < y && k < z;
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(x) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(y) * static_cast<std::size_t>(k));
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

using Offset = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

/// Side length of the object / finger bound in meters.
inline constexpr double kBoundMeters = 0.06;
inline constexpr int kDefaultResolution = 40;
/// Truncation band of every TSDF produced here, in voxels.
inline constexpr double kDefaultTruncVoxels = 5.0;

struct GridGeometry {
  Dims dims;
  double voxel_size = kBoundMeters / kDefaultResolution;
  Vec3 origin{0.0, 0.0, 0.0};

  /// Cubic bound of `resolution` voxels spanning kBoundMeters.
  static GridGeometry cube(int resolution, Vec3 origin = {0.0, 0.0, 0.0});
};

/// Dense truncated signed distance volume; values normalized to [-1, 1],
/// negative inside.
class TsdfVolume {
 public:
  TsdfVolume() = default;
  explicit TsdfVolume(GridGeometry geometry, float fill = 1.0f);
  TsdfVolume(GridGeometry geometry, std::vector<float> values);

  const GridGeometry& geometry() const { return geometry_; }
  const Dims& dims() const { return geometry_.dims; }
  double voxel_size() const { return geometry_.voxel_size; }
  const Vec3& origin() const { return geometry_.origin; }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  float at(int i, int j, int k) const { return values_[geometry_.dims.index(i, j, k)]; }
  /// Stores `v` clamped to [-1, 1].
  void set(int i, int j, int k, float v);

  friend bool operator==(const TsdfVolume& a, const TsdfVolume& b);

 private:
  GridGeometry geometry_;
  std::vector<float> values_;
};

class OccupancyGrid {
 public:
  OccupancyGrid() = default;
  explicit OccupancyGrid(Dims dims, bool fill = false);

  const Dims& dims() const { return dims_; }
  bool at(int i, int j, int k) const { return bits_[dims_.index(i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { bits_[dims_.index(i, j, k)] = v ? 1 : 0; }
  bool at_index(std::size_t idx) const { return bits_[idx] != 0; }
  void set_index(std::size_t idx, bool v) { bits_[idx] = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

  std::span<const std::uint8_t> bits() const { return bits_; }

  friend bool operator==(const OccupancyGrid&, const OccupancyGrid&) = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> bits_;
};

enum class ViewAxis { PlusX, MinusX };

/// Orthographic depth image on the y-z face of a grid. Pixel (u, v) covers
/// voxel row (y = u, z = v); depth is measured from the face the camera sits
/// on, along `view_axis`.
struct DepthImage {
  static constexpr double kFar = std::numeric_limits<double>::infinity();

  int width = 0;
  int height = 0;
  ViewAxis view_axis = ViewAxis::PlusX;
  std::vector<double> depths;

  DepthImage() = default;
  DepthImage(int w, int h, ViewAxis axis) : width(w), height(h), view_axis(axis), depths(static_cast<std::size_t>(w) * h, kFar) {}

  double at(int u, int v) const { return depths[static_cast<std::size_t>(u) + static_cast<std::size_t>(width) * v]; }
  double& at(int u, int v) { return depths[static_cast<std::size_t>(u) + static_cast<std::size_t>(width) * v]; }
  bool hit(int u, int v) const { return at(u, v) != kFar; }
};

/// Voxel is set iff value < iso. Values exactly at iso are exterior.
OccupancyGrid occupancy_from_tsdf(const TsdfVolume& v, double iso = 0.0);

/// Orthographic depth of the first occupied voxel face seen from the -x face
/// (PlusX camera) or the +x face (MinusX camera).
DepthImage render_depth(const TsdfVolume& v, ViewAxis view_axis);

/// Fuses a camera looking along +x (`front`) and one looking along -x (`back`)
/// into a TSDF. Each x-ray becomes a single solid interval between the two
/// observed surfaces; anything hidden from both views is interior.
/// `trunc` is in meters.
TsdfVolume fuse_two_views(const DepthImage& front, const DepthImage& back,
                          const GridGeometry& geometry, double trunc);

/// render_depth from both sides followed by fuse_two_views, default truncation.
TsdfVolume two_view_volume(const TsdfVolume& v);

struct Labeling {
  Dims dims;
  /// 0 = empty, otherwise 1..count, assigned in order of each component's
  /// smallest linear index.
  std::vector<int> labels;
  int count = 0;
  /// sizes[l - 1] = voxel count of label l.
  std::vector<std::size_t> sizes;
};

/// 6-connected component labeling.
Labeling connected_components(const OccupancyGrid& g);

/// Keeps only the largest 6-connected component. Ties go to the component
/// holding the smallest linear index.
OccupancyGrid largest_component(const OccupancyGrid& g);

/// Resamples `v` rotated by `degrees` (counter-clockwise seen from +z) about
/// the vertical axis through the volume center. Samples falling outside the
/// source read +1.
TsdfVolume rotate_about_z(const TsdfVolume& v, double degrees);

/// Number of set voxels p of `a` with p + offset set in `b`. Voxels of `a`
/// shifted out of `b`'s frame vanish.
std::size_t shifted_overlap(const OccupancyGrid& a, const Offset& offset, const OccupancyGrid& b);

TsdfVolume negate(const TsdfVolume& v);

/// Splits into x in [0, nx/2) and [nx/2, nx). Throws DimensionError on odd nx.
std::pair<TsdfVolume, TsdfVolume> split_mid_x(const TsdfVolume& v);

/// Concatenates volumes with equal y/z dims side by side along x. The origin
/// of the result is the origin of the first part.
TsdfVolume concat_x(std::span<const TsdfVolume* const> parts);

/// Sub-block [x0, x0 + nx) along x, origin shifted accordingly.
TsdfVolume slab_x(const TsdfVolume& v, int x0, int nx);

/// Euclidean signed distance transform of an occupancy grid, normalized by
/// `trunc_voxels` and clamped. The surface sits half a voxel outside the
/// boundary voxels, so sign(result) reproduces `g` exactly.
TsdfVolume signed_distance(const OccupancyGrid& g, const GridGeometry& geometry,
                           double trunc_voxels = kDefaultTruncVoxels);

/// Intersection over union of two equally sized grids (1 when both empty).
double iou(const OccupancyGrid& a, const OccupancyGrid& b);

// Binary volume file: "TSDF", u32 x3 dims, f32 voxel size, f32 x3 origin,
// then f32 values, all little-endian, x-fastest.
std::vector<std::uint8_t> encode_volume(const TsdfVolume& v);
TsdfVolume decode_volume(std::span<const std::uint8_t> bytes);
void write_volume(const TsdfVolume& v, const std::filesystem::path& path);
TsdfVolume read_volume(const std::filesystem::path& path);

}  // namespace gripgen::voxelgrid
