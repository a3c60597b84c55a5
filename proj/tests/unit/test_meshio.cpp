#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "gripgen/meshio.hpp"

using namespace gripgen;
using namespace gripgen::meshio;
namespace fs = std::filesystem;
using voxelgrid::GridGeometry;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gripgen_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Random values with the outer shell forced positive.
TsdfVolume shelled_random(int n, std::uint64_t seed, bool exact_levels) {
  TsdfVolume v = fixtures::random_volume(n, seed);
  const auto& d = v.dims();
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        float x = v.at(i, j, k);
        if (exact_levels) x = x < -0.33f ? -1.0f : x < 0.33f ? 0.0f : 1.0f;
        const bool shell = i == 0 || j == 0 || k == 0 || i == d.x - 1 || j == d.y - 1 || k == d.z - 1;
        v.set(i, j, k, shell ? 1.0f : x);
      }
  return v;
}

TriangleMesh unit_cube() {
  TriangleMesh m;
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) m.vertices.push_back({double(i), double(j), double(k)});
  // Vertex index = i + 2j + 4k; two outward triangles per face.
  m.triangles = {{0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
                 {2, 6, 7}, {2, 7, 3}, {0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}};
  return m;
}

// Minimal independent OBJ reader: counts faces and checks index ranges.
std::size_t count_obj_faces(const fs::path& p, std::size_t* vertex_count) {
  std::ifstream in(p);
  std::string line;
  std::size_t v = 0, f = 0;
  while (std::getline(in, line)) {
    if (line.rfind("v ", 0) == 0) ++v;
    if (line.rfind("f ", 0) == 0) {
      std::istringstream ss(line.substr(2));
      long a, b, c;
      REQUIRE(static_cast<bool>(ss >> a >> b >> c));
      for (long x : {a, b, c}) REQUIRE((x >= 1 && static_cast<std::size_t>(x) <= v));
      ++f;
    }
  }
  *vertex_count = v;
  return f;
}

}  // namespace

TEST_CASE("trivial volumes give empty meshes") {
  CHECK(marching_cubes(TsdfVolume(GridGeometry::cube(8), 1.0f)).empty());
  CHECK(marching_cubes(TsdfVolume(GridGeometry::cube(8), -1.0f)).empty());
  CHECK_THROWS_AS(marching_cubes(TsdfVolume(GridGeometry::cube(8)), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(marching_cubes(TsdfVolume(GridGeometry::cube(8)), -1.0), std::invalid_argument);
}

TEST_CASE("single interior voxel closes into a sphere-like surface") {
  TsdfVolume v(GridGeometry::cube(8), 1.0f);
  v.set(3, 4, 2, -0.5f);
  const TriangleMesh m = marching_cubes(v);
  CHECK(m.triangles.size() == 8);  // an octahedron
  CHECK(m.vertices.size() == 6);
  CHECK(euler_characteristic(m) == 2);
  CHECK(non_manifold_edges(m) == 0);
  CHECK(enclosed_volume(m) > 0.0);
}

TEST_CASE("sphere vertices sit on the analytic radius") {
  const int n = 40;
  const double r = 10.0;
  const TsdfVolume v = fixtures::sphere_volume(n, r, {20, 20, 20});
  const TriangleMesh m = marching_cubes(v);
  const double h = v.voxel_size();
  REQUIRE(!m.empty());
  double worst = 0.0;
  for (const auto& p : m.vertices) worst = std::max(worst, std::abs(std::hypot(p[0] / h - 20, p[1] / h - 20, p[2] / h - 20) - r));
  CHECK(worst <= 1.0);
  CHECK(non_manifold_edges(m) == 0);
  CHECK(euler_characteristic(m) == 2);
  // Outward winding: every normal points away from the center.
  for (std::size_t i = 0; i < m.triangles.size(); ++i) {
    const auto& t = m.triangles[i];
    double dot = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double c = (m.vertices[t[0]][a] + m.vertices[t[1]][a] + m.vertices[t[2]][a]) / 3 - 20 * h;
      dot += c * m.normals[i][a];
    }
    REQUIRE(dot > 0.0);
  }
  const double vol = enclosed_volume(m) / (h * h * h);
  CHECK(vol == doctest::Approx(4.0 / 3.0 * M_PI * r * r * r).epsilon(0.03));
}

TEST_CASE("torus has Euler characteristic zero") {
  const auto torus = fixtures::volume_where(32, [](int i, int j, int k) {
    const double x = i + 0.5 - 16, y = j + 0.5 - 16, z = k + 0.5 - 16;
    return std::hypot(std::hypot(x, y) - 9, z) < 3.5;
  });
  const TriangleMesh m = marching_cubes(torus);
  CHECK(euler_characteristic(m) == 0);
  CHECK(non_manifold_edges(m) == 0);
}

TEST_CASE("padding closes shapes cut by the grid boundary") {
  const TsdfVolume floor_box = fixtures::box_volume(12, {3, 3, 0}, {9, 9, 5});
  const TriangleMesh open = marching_cubes(floor_box);
  CHECK(non_manifold_edges(open) > 0);
  const TsdfVolume padded = pad_exterior(floor_box);
  CHECK(padded.dims().x == 14);
  CHECK(padded.at(0, 0, 0) == 1.0f);
  CHECK(padded.at(4, 4, 1) == floor_box.at(3, 3, 0));
  const TriangleMesh closed = marching_cubes(padded);
  CHECK(non_manifold_edges(closed) == 0);
  CHECK(euler_characteristic(closed) == 2);
  // World positions are unchanged: the lowest vertex lies between the floor
  // voxel center and the padding voxel center below it.
  double zmin = 1e9;
  for (const auto& p : closed.vertices) zmin = std::min(zmin, p[2]);
  const double h = floor_box.voxel_size();
  CHECK(zmin > -0.5 * h);
  CHECK(zmin < 0.5 * h);
  CHECK_THROWS_AS(pad_exterior(floor_box, -1), std::invalid_argument);
}

TEST_CASE("watertight on random volumes with a positive shell") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    CAPTURE(seed);
    const TriangleMesh m = marching_cubes(shelled_random(9, seed, false));
    CHECK(non_manifold_edges(m) == 0);
    CHECK(enclosed_volume(m) > 0.0);
    // Every closed component has even Euler characteristic.
    CHECK(euler_characteristic(m) % 2 == 0);
  }
}

TEST_CASE("values exactly at iso produce no degenerate triangles") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    const TriangleMesh m = marching_cubes(shelled_random(8, seed, true));
    REQUIRE(m.normals.size() == m.triangles.size());
    for (std::size_t i = 0; i < m.triangles.size(); ++i) {
      const auto& t = m.triangles[i];
      for (auto idx : t) REQUIRE(idx < m.vertices.size());
      REQUIRE(t[0] != t[1]);
      REQUIRE(t[1] != t[2]);
      REQUIRE(t[0] != t[2]);
      REQUIRE(std::hypot(m.normals[i][0], m.normals[i][1], m.normals[i][2]) == doctest::Approx(1.0));
    }
    // Welding leaves no two vertices within the tolerance.
    std::set<std::array<long long, 3>> keys;
    for (const auto& p : m.vertices)
      keys.insert({std::llround(p[0] / kWeldTolerance), std::llround(p[1] / kWeldTolerance),
                   std::llround(p[2] / kWeldTolerance)});
    CHECK(keys.size() == m.vertices.size());
  }
}

TEST_CASE("OBJ output") {
  const fs::path dir = fresh_dir("obj");
  const TriangleMesh cube = unit_cube();
  CHECK(enclosed_volume(cube) == doctest::Approx(1.0));
  CHECK(non_manifold_edges(cube) == 0);
  write_obj(cube, dir / "cube.obj");
  std::size_t nv = 0;
  CHECK(count_obj_faces(dir / "cube.obj", &nv) == 12);
  CHECK(nv == 8);

  // write -> read -> write reproduces the text.
  const TriangleMesh sphere = marching_cubes(fixtures::sphere_volume(16, 5.0, {8, 8, 8}));
  write_obj(sphere, dir / "a.obj");
  const TriangleMesh back = read_obj(dir / "a.obj");
  CHECK(back.triangles == sphere.triangles);
  write_obj(back, dir / "b.obj");
  CHECK(obj_text(back) == obj_text(sphere));
  std::ifstream a(dir / "a.obj"), b(dir / "b.obj");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());

  std::ofstream(dir / "quad.obj") << "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
  CHECK_THROWS_AS(read_obj(dir / "quad.obj"), MeshFormatError);
  std::ofstream(dir / "range.obj") << "v 0 0 0\nf 1 2 3\n";
  CHECK_THROWS_AS(read_obj(dir / "range.obj"), MeshFormatError);
}

TEST_CASE("binary STL layout") {
  const fs::path dir = fresh_dir("stl");
  write_stl(TriangleMesh{}, dir / "empty.stl");
  CHECK(fs::file_size(dir / "empty.stl") == 84);
  const auto empty = stl_bytes(TriangleMesh{});
  CHECK(empty[80] == 0);

  // No stored normals: the writer derives them.
  const TriangleMesh cube = unit_cube();
  const auto bytes = stl_bytes(cube);
  REQUIRE(bytes.size() == 84 + 50 * 12);
  std::uint32_t count = 0;
  for (int b = 0; b < 4; ++b) count |= static_cast<std::uint32_t>(bytes[80 + b]) << (8 * b);
  CHECK(count == 12);
  auto f32 = [&](std::size_t at) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[at + b]) << (8 * b);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  };
  for (std::size_t i = 0; i < 12; ++i) {
    const std::size_t at = 84 + 50 * i;
    for (int c = 0; c < 3; ++c)
      for (int a = 0; a < 3; ++a)
        CHECK(f32(at + 12 + 12 * c + 4 * a) == static_cast<float>(cube.vertices[cube.triangles[i][c]][a]));
    CHECK(bytes[at + 48] == 0);
    CHECK(bytes[at + 49] == 0);
  }
  // First triangle lies in z = 0 with an outward normal of -z.
  CHECK(f32(84 + 8) == -1.0f);
}
