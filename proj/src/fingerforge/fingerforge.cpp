#include "gripgen/fingerforge.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

namespace gripgen::fingerforge {

using voxelgrid::Dims;
using voxelgrid::GridGeometry;
using voxelgrid::OccupancyGrid;

std::string to_string(Handedness h) { return h == Handedness::Left ? "left" : "right"; }
std::string to_string(MountFace m) { return m == MountFace::MinusX ? "-x" : "+x"; }

Handedness handedness_from_string(const std::string& s) {
  if (s == "left") return Handedness::Left;
  if (s == "right") return Handedness::Right;
  throw std::invalid_argument("unknown handedness '" + s + "'");
}

FeasibilityCheck check_feasibility(const Finger& f) {
  const OccupancyGrid occ = voxelgrid::occupancy_from_tsdf(f.volume);
  const voxelgrid::Labeling lab = voxelgrid::connected_components(occ);
  const OccupancyGrid kept = voxelgrid::largest_component(occ);
  const Dims d = occ.dims();

  FeasibilityCheck out{{}, f};
  out.report.component_count = kept.empty() ? 0 : 1;
  std::size_t base = 0;
  const int layer = f.mount_layer();
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j) base += kept.at(layer, j, k);
  out.report.base_fraction = static_cast<double>(base) / (static_cast<double>(d.y) * d.z);
  out.report.feasible =
      out.report.component_count == 1 && out.report.base_fraction >= kMinBaseFraction;
  if (lab.count > 1) out.repaired.volume = voxelgrid::signed_distance(kept, f.volume.geometry());
  return out;
}

std::pair<Finger, Finger> make_imprint_pair(const TsdfVolume& object) {
  const Dims d = object.dims();
  if (d.x % 2 != 0) throw voxelgrid::DimensionError("imprint fingers need an even x dimension");
  const int half = d.x / 2;
  const auto [left_half, right_half] = voxelgrid::split_mid_x(voxelgrid::negate(voxelgrid::two_view_volume(object)));
  const OccupancyGrid left_cavity = voxelgrid::occupancy_from_tsdf(left_half);
  const OccupancyGrid right_cavity = voxelgrid::occupancy_from_tsdf(right_half);

  // Halves keep their world x order: the left finger's inner slab sits at its
  // +x side, the right finger's at its -x side.
  OccupancyGrid left(d), right(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < half; ++i) {
        left.set(i, j, k, true);
        left.set(half + i, j, k, left_cavity.at(i, j, k));
        right.set(i, j, k, right_cavity.at(i, j, k));
        right.set(half + i, j, k, true);
      }

  return {Finger{voxelgrid::signed_distance(left, object.geometry()), Handedness::Left},
          Finger{voxelgrid::signed_distance(right, object.geometry()), Handedness::Right}};
}

SliceResult slice_and_stretch(const TsdfVolume& volume, Handedness handedness, double area_threshold) {
  const Dims d = volume.dims();
  const OccupancyGrid occ = voxelgrid::occupancy_from_tsdf(volume);
  const double face = static_cast<double>(d.y) * d.z;
  const int span = (d.x + 2) / 3;  // ceil(nx / 3)
  const bool left = handedness == Handedness::Left;

  SliceResult out{Finger{volume, handedness}, false, -1};
  for (int step = 0; step < span; ++step) {
    const int x = left ? step : d.x - 1 - step;
    std::size_t area = 0;
    for (int k = 0; k < d.z; ++k)
      for (int j = 0; j < d.y; ++j) area += occ.at(x, j, k);
    if (static_cast<double>(area) >= area_threshold * face) {
      out.plane = x;
      break;
    }
  }
  if (out.plane < 0) return out;
  out.qualified = true;
  if (out.plane == out.finger.mount_layer()) return out;

  // Stretch the kept part [plane, far face] over the whole bound so that the
  // found plane lands exactly on the mount layer.
  TsdfVolume stretched(volume.geometry());
  const int n1 = d.x - 1;
  for (int i = 0; i < d.x; ++i) {
    const double src = left ? out.plane + static_cast<double>(i * (n1 - out.plane)) / n1
                            : static_cast<double>(i * out.plane) / n1;
    const int x0 = std::min(static_cast<int>(std::floor(src)), n1);
    const int x1 = std::min(x0 + 1, n1);
    const double t = src - x0;
    for (int k = 0; k < d.z; ++k)
      for (int j = 0; j < d.y; ++j) {
        const double v = (1.0 - t) * volume.at(x0, j, k) + t * volume.at(x1, j, k);
        stretched.set(i, j, k, static_cast<float>(v));
      }
  }
  out.finger.volume = std::move(stretched);
  return out;
}

Finger flat_block_finger(int thickness_voxels, Handedness handedness, int resolution) {
  if (thickness_voxels < 1 || thickness_voxels > resolution) {
    throw std::out_of_range("flat block thickness must be in [1, " + std::to_string(resolution) + "]");
  }
  const GridGeometry geo = GridGeometry::cube(resolution);
  OccupancyGrid g(geo.dims);
  for (int k = 0; k < resolution; ++k)
    for (int j = 0; j < resolution; ++j)
      for (int t = 0; t < thickness_voxels; ++t) {
        g.set(handedness == Handedness::Left ? t : resolution - 1 - t, j, k, true);
      }
  return Finger{voxelgrid::signed_distance(g, geo), handedness};
}

void write_finger(const Finger& f, const std::filesystem::path& path) {
  voxelgrid::write_volume(f.volume, path);
  nlohmann::json side{{"handedness", to_string(f.handedness)}, {"mount_face", to_string(f.mount_face())}};
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write finger sidecar for " + path.string());
  out << side.dump(2) << "\n";
}

Finger read_finger(const std::filesystem::path& path) {
  Finger f{voxelgrid::read_volume(path), Handedness::Left};
  std::ifstream in(path.string() + ".json");
  if (!in) throw std::runtime_error("missing finger sidecar " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
    f.handedness = handedness_from_string(side.at("handedness").get<std::string>());
    if (side.at("mount_face").get<std::string>() != to_string(f.mount_face())) {
      throw std::invalid_argument("mount face contradicts handedness");
    }
  } catch (const std::exception& e) {
    throw voxelgrid::FormatError(path.string() + ".json: " + e.what());
  }
  return f;
}

}  // namespace gripgen::fingerforge
