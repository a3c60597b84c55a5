#include "gripgen/meshio.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace gripgen::meshio {

namespace detail {
extern const int kEdgeTable[256];
extern const int kTriTable[256][16];
}  // namespace detail

namespace fs = std::filesystem;

namespace {

// Cube corner offsets and edge endpoints in the table's numbering.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                              {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

Vec3 face_normal(const TriangleMesh& m, const std::array<std::uint32_t, 3>& t) {
  const Vec3 n = cross(sub(m.vertices[t[1]], m.vertices[t[0]]), sub(m.vertices[t[2]], m.vertices[t[0]]));
  const double l = norm(n);
  return l > 0 ? Vec3{n[0] / l, n[1] / l, n[2] / l} : Vec3{0, 0, 0};
}

// Triangles smaller than this (m^2) count as degenerate.
constexpr double kMinDoubleArea = 1e-18;

class Welder {
 public:
  explicit Welder(TriangleMesh& m) : m_(m) {}
  std::uint32_t add(const Vec3& p) {
    const std::array<long long, 3> key{std::llround(p[0] / kWeldTolerance), std::llround(p[1] / kWeldTolerance),
                                       std::llround(p[2] / kWeldTolerance)};
    auto [it, fresh] = index_.emplace(key, static_cast<std::uint32_t>(m_.vertices.size()));
    if (fresh) m_.vertices.push_back(p);
    return it->second;
  }

 private:
  TriangleMesh& m_;
  std::map<std::array<long long, 3>, std::uint32_t> index_;
};

}  // namespace

TriangleMesh marching_cubes(const TsdfVolume& v, double iso) {
  if (!(iso > -1.0 && iso < 1.0)) throw std::invalid_argument("iso level must lie in (-1, 1)");
  TriangleMesh mesh;
  const auto& d = v.dims();
  if (d.x < 2 || d.y < 2 || d.z < 2) return mesh;
  const double h = v.voxel_size();
  const Vec3 o = v.origin();
  auto center = [&](int i, int j, int k) {
    return Vec3{o[0] + (i + 0.5) * h, o[1] + (j + 0.5) * h, o[2] + (k + 0.5) * h};
  };
  // One interpolated point per lattice edge, always computed from the lower
  // endpoint so neighbouring cubes agree exactly.
  std::unordered_map<std::uint64_t, Vec3> edge_points;
  auto edge_point = [&](int i, int j, int k, int axis) -> const Vec3& {
    const std::uint64_t key = d.index(i, j, k) * 3 + static_cast<std::uint64_t>(axis);
    auto it = edge_points.find(key);
    if (it != edge_points.end()) return it->second;
    int i1 = i, j1 = j, k1 = k;
    (axis == 0 ? i1 : axis == 1 ? j1 : k1) += 1;
    const double a = v.at(i, j, k), b = v.at(i1, j1, k1);
    const double t = (iso - a) / (b - a);
    const Vec3 p0 = center(i, j, k), p1 = center(i1, j1, k1);
    return edge_points.emplace(key, Vec3{p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]),
                                         p0[2] + t * (p1[2] - p0[2])})
        .first->second;
  };

  Welder weld(mesh);
  for (int k = 0; k + 1 < d.z; ++k)
    for (int j = 0; j + 1 < d.y; ++j)
      for (int i = 0; i + 1 < d.x; ++i) {
        int cube = 0;
        for (int c = 0; c < 8; ++c)
          if (v.at(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]) < iso) cube |= 1 << c;
        if (detail::kEdgeTable[cube] == 0) continue;
        std::array<Vec3, 12> pts{};
        for (int e = 0; e < 12; ++e) {
          if (!(detail::kEdgeTable[cube] & (1 << e))) continue;
          const int* a = kCorner[kEdge[e][0]];
          const int* b = kCorner[kEdge[e][1]];
          const int lo[3] = {std::min(a[0], b[0]), std::min(a[1], b[1]), std::min(a[2], b[2])};
          const int axis = a[0] != b[0] ? 0 : a[1] != b[1] ? 1 : 2;
          pts[e] = edge_point(i + lo[0], j + lo[1], k + lo[2], axis);
        }
        const int* tri = detail::kTriTable[cube];
        for (int t = 0; tri[t] != -1; t += 3) {
          // The table winds triangles inward for this sign convention.
          const std::array<std::uint32_t, 3> f{weld.add(pts[tri[t]]), weld.add(pts[tri[t + 2]]),
                                               weld.add(pts[tri[t + 1]])};
          if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
          const Vec3 n = cross(sub(mesh.vertices[f[1]], mesh.vertices[f[0]]),
                               sub(mesh.vertices[f[2]], mesh.vertices[f[0]]));
          if (norm(n) <= kMinDoubleArea) continue;
          mesh.triangles.push_back(f);
        }
      }
  // Welding may leave vertices no surviving triangle uses; compact them.
  std::vector<std::int64_t> remap(mesh.vertices.size(), -1);
  std::vector<Vec3> used;
  for (auto& t : mesh.triangles)
    for (auto& idx : t) {
      if (remap[idx] < 0) {
        remap[idx] = static_cast<std::int64_t>(used.size());
        used.push_back(mesh.vertices[idx]);
      }
      idx = static_cast<std::uint32_t>(remap[idx]);
    }
  mesh.vertices = std::move(used);
  for (const auto& t : mesh.triangles) mesh.normals.push_back(face_normal(mesh, t));
  return mesh;
}

TsdfVolume pad_exterior(const TsdfVolume& v, int layers) {
  if (layers < 0) throw std::invalid_argument("pad layers must be >= 0");
  voxelgrid::GridGeometry g = v.geometry();
  g.dims = {g.dims.x + 2 * layers, g.dims.y + 2 * layers, g.dims.z + 2 * layers};
  for (double& o : g.origin) o -= layers * g.voxel_size;
  TsdfVolume out(g, 1.0f);
  const auto& d = v.dims();
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) out.set(i + layers, j + layers, k + layers, v.at(i, j, k));
  return out;
}

std::size_t non_manifold_edges(const TriangleMesh& m) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> uses;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) {
      const std::uint32_t a = t[e], b = t[(e + 1) % 3];
      ++uses[{std::min(a, b), std::max(a, b)}];
    }
  std::size_t bad = 0;
  for (const auto& [edge, n] : uses)
    if (n != 2) ++bad;
  return bad;
}

long euler_characteristic(const TriangleMesh& m) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> edges;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) {
      const std::uint32_t a = t[e], b = t[(e + 1) % 3];
      edges[{std::min(a, b), std::max(a, b)}] = 1;
    }
  return static_cast<long>(m.vertices.size()) - static_cast<long>(edges.size()) +
         static_cast<long>(m.triangles.size());
}

double enclosed_volume(const TriangleMesh& m) {
  double six_v = 0.0;
  for (const auto& t : m.triangles) {
    const Vec3 &a = m.vertices[t[0]], &b = m.vertices[t[1]], &c = m.vertices[t[2]];
    const Vec3 bc = cross(b, c);
    six_v += a[0] * bc[0] + a[1] * bc[1] + a[2] * bc[2];
  }
  return six_v / 6.0;
}

std::string obj_text(const TriangleMesh& m) {
  std::string out;
  char buf[128];
  for (const Vec3& p : m.vertices) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", p[0], p[1], p[2]);
    out += buf;
  }
  for (const auto& t : m.triangles) {
    std::snprintf(buf, sizeof buf, "f %u %u %u\n", t[0] + 1, t[1] + 1, t[2] + 1);
    out += buf;
  }
  return out;
}

void write_obj(const TriangleMesh& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << obj_text(m);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TriangleMesh read_obj(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TriangleMesh m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p[0] >> p[1] >> p[2])) throw MeshFormatError(where + ": bad vertex");
      m.vertices.push_back(p);
    } else if (tag == "f") {
      std::array<std::uint32_t, 3> t{};
      std::string tok;
      int n = 0;
      while (ss >> tok) {
        if (n == 3) throw MeshFormatError(where + ": only triangles are supported");
        // "a", "a/b", "a//c" all start with the vertex index.
        const long idx = std::strtol(tok.c_str(), nullptr, 10);
        if (idx < 1 || static_cast<std::size_t>(idx) > m.vertices.size())
          throw MeshFormatError(where + ": vertex index out of range");
        t[n++] = static_cast<std::uint32_t>(idx - 1);
      }
      if (n != 3) throw MeshFormatError(where + ": face needs three vertices");
      m.triangles.push_back(t);
    }
  }
  for (const auto& t : m.triangles) m.normals.push_back(face_normal(m, t));
  return m;
}

std::vector<std::uint8_t> stl_bytes(const TriangleMesh& m) {
  std::vector<std::uint8_t> out(84 + 50 * m.triangles.size(), 0);
  const char header[] = "gripgen binary STL";
  std::memcpy(out.data(), header, sizeof header - 1);
  auto put_u32 = [&](std::size_t at, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out[at + b] = static_cast<std::uint8_t>(v >> (8 * b));
  };
  auto put_f32 = [&](std::size_t at, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(at, u);
  };
  put_u32(80, static_cast<std::uint32_t>(m.triangles.size()));
  for (std::size_t i = 0; i < m.triangles.size(); ++i) {
    const std::size_t at = 84 + 50 * i;
    const Vec3 n = i < m.normals.size() ? m.normals[i] : face_normal(m, m.triangles[i]);
    for (int a = 0; a < 3; ++a) put_f32(at + 4 * a, n[a]);
    for (int c = 0; c < 3; ++c)
      for (int a = 0; a < 3; ++a) put_f32(at + 12 + 12 * c + 4 * a, m.vertices[m.triangles[i][c]][a]);
    // Attribute byte count stays zero.
  }
  return out;
}

void write_stl(const TriangleMesh& m, const fs::path& path) {
  const auto bytes = stl_bytes(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace gripgen::meshio
