#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "gripgen/voxelgrid.hpp"

using namespace gripgen::voxelgrid;

namespace {

// Recursive flood fill, deliberately independent of the iterative labeler.
void flood(const OccupancyGrid& g, std::vector<int>& lab, int i, int j, int k, int id) {
  const Dims d = g.dims();
  if (!d.contains(i, j, k) || !g.at(i, j, k) || lab[d.index(i, j, k)] != 0) return;
  lab[d.index(i, j, k)] = id;
  flood(g, lab, i + 1, j, k, id);
  flood(g, lab, i - 1, j, k, id);
  flood(g, lab, i, j + 1, k, id);
  flood(g, lab, i, j - 1, k, id);
  flood(g, lab, i, j, k + 1, id);
  flood(g, lab, i, j, k - 1, id);
}

std::size_t brute_overlap(const OccupancyGrid& a, const Offset& o, const OccupancyGrid& b) {
  std::size_t n = 0;
  const Dims d = a.dims();
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        const int x = i + o[0], y = j + o[1], z = k + o[2];
        if (a.at(i, j, k) && b.dims().contains(x, y, z) && b.at(x, y, z)) ++n;
      }
  return n;
}

}  // namespace

TEST_CASE("occupancy_from_tsdf thresholds strictly below iso") {
  const GridGeometry geo = GridGeometry::cube(8);
  CHECK(occupancy_from_tsdf(TsdfVolume(geo, 1.0f)).count() == 0);
  CHECK(occupancy_from_tsdf(TsdfVolume(geo, -1.0f)).count() == geo.dims.count());

  const TsdfVolume v = fixtures::random_volume(8, 7);
  const OccupancyGrid g = occupancy_from_tsdf(v, 0.25);
  for (std::size_t i = 0; i < v.values().size(); ++i) CHECK(g.at_index(i) == (v.values()[i] < 0.25f));
}

TEST_CASE("occupancy of negation is the complement away from exact zeros") {
  TsdfVolume v = fixtures::random_volume(8, 11);
  v.values()[3] = 0.0f;
  const OccupancyGrid a = occupancy_from_tsdf(v);
  const OccupancyGrid b = occupancy_from_tsdf(negate(v));
  for (std::size_t i = 0; i < v.values().size(); ++i) {
    if (v.values()[i] == 0.0f) {
      CHECK_FALSE(a.at_index(i));
      CHECK_FALSE(b.at_index(i));
    } else {
      CHECK(a.at_index(i) != b.at_index(i));
    }
  }
}

TEST_CASE("fuse_two_views") {
  const GridGeometry geo = GridGeometry::cube(20);
  const double vs = geo.voxel_size;

  SUBCASE("empty scene is all exterior") {
    const DepthImage front(20, 20, ViewAxis::PlusX), back(20, 20, ViewAxis::MinusX);
    const TsdfVolume v = fuse_two_views(front, back, geo, 5 * vs);
    for (float x : v.values()) CHECK(x == 1.0f);
  }

  SUBCASE("two opposing depth planes give the slab between them") {
    DepthImage front(20, 20, ViewAxis::PlusX), back(20, 20, ViewAxis::MinusX);
    // Analytic slab x in [6, 13): front sees x = 6 faces, back sees x = 13 faces.
    for (double& d : front.depths) d = 6 * vs;
    for (double& d : back.depths) d = (20 - 13) * vs;
    const OccupancyGrid g = occupancy_from_tsdf(fuse_two_views(front, back, geo, 5 * vs));
    const OccupancyGrid expect = fixtures::grid_where(geo.dims, [](int i, int, int) { return i >= 6 && i < 13; });
    CHECK(g == expect);
  }

  SUBCASE("lateral through-hole is invisible from both x views") {
    const TsdfVolume obj = fixtures::volume_where(20, [](int i, int, int k) {
      const bool block = i >= 4 && i < 16 && k >= 2 && k < 14;
      const bool hole = i >= 8 && i < 12 && k >= 6 && k < 10;  // runs along y
      return block && !hole;
    });
    const OccupancyGrid fused = occupancy_from_tsdf(two_view_volume(obj));
    // Ray-cast oracle: solid between the first and last occupied voxel per x-ray.
    const OccupancyGrid src = occupancy_from_tsdf(obj);
    const OccupancyGrid oracle = fixtures::grid_where(geo.dims, [&](int i, int j, int k) {
      int lo = 99, hi = -1;
      for (int x = 0; x < 20; ++x)
        if (src.at(x, j, k)) lo = std::min(lo, x), hi = std::max(hi, x);
      return i >= lo && i <= hi;
    });
    CHECK(fused == oracle);
    CHECK(fused.at(10, 5, 8));
    CHECK_FALSE(src.at(10, 5, 8));
  }

  SUBCASE("every x-ray of a fused volume is one contiguous interval") {
    const TsdfVolume obj = fixtures::random_volume(20, 3);
    const OccupancyGrid g = occupancy_from_tsdf(two_view_volume(obj));
    for (int k = 0; k < 20; ++k)
      for (int j = 0; j < 20; ++j) {
        int runs = 0;
        for (int i = 0; i < 20; ++i) runs += g.at(i, j, k) && (i == 0 || !g.at(i - 1, j, k));
        CHECK(runs <= 1);
      }
  }

  SUBCASE("mismatched images are rejected") {
    const DepthImage front(19, 20, ViewAxis::PlusX), back(20, 20, ViewAxis::MinusX);
    CHECK_THROWS_AS(fuse_two_views(front, back, geo, 5 * vs), DimensionError);
  }
}

TEST_CASE("connected components") {
  const Dims d{8, 8, 8};
  SUBCASE("single voxel") {
    OccupancyGrid g(d);
    g.set(3, 4, 5, true);
    const Labeling lab = connected_components(g);
    CHECK(lab.count == 1);
    CHECK(lab.sizes == std::vector<std::size_t>{1});
  }
  SUBCASE("edge and corner contacts do not connect") {
    OccupancyGrid g(d);
    g.set(1, 1, 1, true);
    g.set(2, 2, 1, true);
    g.set(3, 3, 2, true);
    CHECK(connected_components(g).count == 3);
  }
  SUBCASE("random grids match recursive flood fill") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const OccupancyGrid g = fixtures::random_grid(d, 0.45, seed);
      const Labeling lab = connected_components(g);
      std::vector<int> oracle(d.count(), 0);
      int next = 0;
      for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j)
          for (int i = 0; i < 8; ++i)
            if (g.at(i, j, k) && oracle[d.index(i, j, k)] == 0) flood(g, oracle, i, j, k, ++next);
      CHECK(lab.count == next);
      // Scan-order seeding makes the two labelings identical, not merely equivalent.
      CHECK(lab.labels == oracle);
      std::size_t covered = 0;
      for (std::size_t s : lab.sizes) covered += s;
      CHECK(covered == g.count());
    }
  }
}

TEST_CASE("largest_component") {
  const Dims d{8, 8, 8};
  SUBCASE("solid block is unchanged") {
    const OccupancyGrid g = fixtures::grid_where(d, [](int i, int j, int k) { return i < 4 && j < 5 && k < 6; });
    CHECK(largest_component(g) == g);
  }
  SUBCASE("bigger blob wins") {
    OccupancyGrid g(d);
    for (int i = 0; i < 3; ++i) g.set(i, 0, 0, true);          // 3 voxels
    for (int i = 0; i < 5; ++i) {                               // 10 voxels
      g.set(i, 4, 4, true);
      g.set(i, 5, 4, true);
    }
    const OccupancyGrid out = largest_component(g);
    CHECK(out.count() == 10);
    CHECK_FALSE(out.at(0, 0, 0));
    CHECK(out.at(0, 4, 4));
  }
  SUBCASE("ties keep the component with the smallest linear index") {
    OccupancyGrid g(d);
    g.set(5, 5, 5, true);
    g.set(6, 5, 5, true);
    g.set(1, 0, 0, true);
    g.set(2, 0, 0, true);
    const OccupancyGrid out = largest_component(g);
    CHECK(out.at(1, 0, 0));
    CHECK_FALSE(out.at(5, 5, 5));
  }
  SUBCASE("empty stays empty") { CHECK(largest_component(OccupancyGrid(d)).count() == 0); }
}

TEST_CASE("rotate_about_z") {
  SUBCASE("zero angle is bitwise identity") {
    const TsdfVolume v = fixtures::random_volume(10, 5);
    CHECK(rotate_about_z(v, 0.0) == v);
  }
  SUBCASE("quarter turn of a box equals the axis permutation") {
    const TsdfVolume box = fixtures::box_volume(20, {3, 6, 2}, {15, 11, 12});
    const TsdfVolume rot = rotate_about_z(box, 90.0);
    // Counter-clockwise: (i, j) -> (n-1-j, i).
    double worst = 0.0;
    for (int k = 0; k < 20; ++k)
      for (int j = 0; j < 20; ++j)
        for (int i = 0; i < 20; ++i) {
          const double expect = box.at(j, 19 - i, k);
          worst = std::max(worst, std::abs(rot.at(i, j, k) - expect));
        }
    CHECK(worst <= 0.1);
    CHECK(occupancy_from_tsdf(rot).count() == occupancy_from_tsdf(box).count());
  }
  SUBCASE("forward and back keeps a sphere") {
    const TsdfVolume s = fixtures::sphere_volume(40, 10.0, {20, 20, 20});
    const TsdfVolume back = rotate_about_z(rotate_about_z(s, 20.0), -20.0);
    CHECK(iou(occupancy_from_tsdf(s), occupancy_from_tsdf(back)) >= 0.95);
  }
  SUBCASE("values stay clamped and outside samples read exterior") {
    const TsdfVolume full(GridGeometry::cube(12), -1.0f);
    const TsdfVolume rot = rotate_about_z(full, 45.0);
    CHECK(rot.at(0, 0, 3) > 0.0f);  // corner pulls from outside the source
    for (float x : rot.values()) CHECK((x >= -1.0f && x <= 1.0f));
  }
}

TEST_CASE("shifted_overlap") {
  const Dims d{8, 8, 8};
  SUBCASE("disjoint grids") {
    OccupancyGrid a(d), b(d);
    a.set(1, 1, 1, true);
    b.set(5, 5, 5, true);
    CHECK(shifted_overlap(a, {0, 0, 0}, b) == 0);
  }
  SUBCASE("adjacent voxels meet after a unit shift") {
    OccupancyGrid a(d), b(d);
    a.set(2, 3, 4, true);
    b.set(3, 3, 4, true);
    CHECK(shifted_overlap(a, {1, 0, 0}, b) == 1);
    CHECK(shifted_overlap(a, {-1, 0, 0}, b) == 0);
  }
  SUBCASE("random pairs match the triple loop and are antisymmetric in the offset") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> off(-9, 9);
    for (std::uint64_t s = 0; s < 30; ++s) {
      const OccupancyGrid a = fixtures::random_grid(d, 0.3, 2 * s);
      const OccupancyGrid b = fixtures::random_grid(d, 0.3, 2 * s + 1);
      const Offset o{off(rng), off(rng), off(rng)};
      CHECK(shifted_overlap(a, o, b) == brute_overlap(a, o, b));
      CHECK(shifted_overlap(a, o, b) == shifted_overlap(b, {-o[0], -o[1], -o[2]}, a));
    }
  }
}

TEST_CASE("negate and split") {
  const TsdfVolume ones(GridGeometry::cube(40), 1.0f);
  const TsdfVolume neg = negate(ones);
  for (float x : neg.values()) CHECK(x == -1.0f);
  const TsdfVolume v = fixtures::random_volume(40, 1);
  CHECK(negate(negate(v)) == v);

  auto [left, right] = split_mid_x(v);
  CHECK(left.dims() == Dims{20, 40, 40});
  CHECK(right.dims() == Dims{20, 40, 40});
  CHECK(right.origin()[0] == doctest::Approx(20 * v.voxel_size()));
  const TsdfVolume* parts[] = {&left, &right};
  CHECK(concat_x(parts) == v);

  GridGeometry odd = GridGeometry::cube(8);
  odd.dims.x = 7;
  CHECK_THROWS_AS(split_mid_x(TsdfVolume(odd)), DimensionError);
}

TEST_CASE("signed_distance reproduces occupancy and distance") {
  const OccupancyGrid g = fixtures::random_grid({10, 10, 10}, 0.5, 4);
  const TsdfVolume v = signed_distance(g, GridGeometry::cube(10));
  CHECK(occupancy_from_tsdf(v) == g);

  OccupancyGrid single({9, 9, 9});
  single.set(4, 4, 4, true);
  const TsdfVolume s = signed_distance(single, GridGeometry::cube(9));
  CHECK(s.at(4, 4, 4) == doctest::Approx(-0.5 / 5.0));
  CHECK(s.at(7, 4, 4) == doctest::Approx(2.5 / 5.0));
  CHECK(s.at(5, 5, 4) == doctest::Approx((std::sqrt(2.0) - 0.5) / 5.0));
}

TEST_CASE("volume file format") {
  const auto dir = std::filesystem::temp_directory_path() / "gripgen_test_voxelgrid";
  std::filesystem::create_directories(dir);
  TsdfVolume v = fixtures::random_volume(6, 12);

  SUBCASE("round trip is bit exact") {
    write_volume(v, dir / "a.tsdf");
    const TsdfVolume back = read_volume(dir / "a.tsdf");
    CHECK(back == v);
    CHECK(encode_volume(back) == encode_volume(v));
  }
  SUBCASE("header layout") {
    const auto bytes = encode_volume(v);
    CHECK(bytes.size() == 32 + 4 * 216);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TSDF");
    CHECK(bytes[4] == 6);
    CHECK(bytes[5] == 0);
  }
  SUBCASE("truncated file") {
    auto bytes = encode_volume(v);
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_volume(bytes), FormatError);
  }
  SUBCASE("bad magic") {
    auto bytes = encode_volume(v);
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_volume(bytes), FormatError);
  }
  SUBCASE("out of range value names the voxel") {
    auto bytes = encode_volume(v);
    const float bad = 1.5f;
    std::memcpy(&bytes[32 + 4 * 17], &bad, 4);
    try {
      decode_volume(bytes);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("index 17") != std::string::npos);
    }
  }
}
