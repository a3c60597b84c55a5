#include "gripgen/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace gripgen::datastore {

namespace fs = std::filesystem;
using nlohmann::json;
using voxelgrid::GridGeometry;
using voxelgrid::OccupancyGrid;

namespace {

constexpr const char* kFormat = "gripgen-dataset";
constexpr std::array<Provenance, 4> kAllProvenance{Provenance::Imprint, Provenance::ShapenetStyle,
                                                   Provenance::Generated, Provenance::Baseline};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string record_context(const GraspRecord& r) { return "record " + r.id + " (object " + r.object_id + ")"; }

json record_to_json(const GraspRecord& r) {
  json score = json::array();
  for (float v : r.score.as_vector()) score.push_back(static_cast<int>(v));
  return {{"id", r.id},
          {"object_id", r.object_id},
          {"object", r.object_file},
          {"left", r.left_file},
          {"right", r.right_file},
          {"score", score},
          {"provenance", to_string(r.provenance)},
          {"config_hash", r.config_hash}};
}

GraspRecord record_from_json(const json& j, std::size_t index) {
  const std::string where = "record #" + std::to_string(index);
  if (!j.is_object()) throw ValidationError(where + ": not an object");
  GraspRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.object_id = j.at("object_id").get<std::string>();
    r.object_file = j.at("object").get<std::string>();
    r.left_file = j.at("left").get<std::string>();
    r.right_file = j.at("right").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    std::vector<float> bits;
    for (const json& b : j.at("score")) {
      const int v = b.get<int>();
      if (v != 0 && v != 1) throw std::invalid_argument("score entries must be 0 or 1");
      bits.push_back(static_cast<float>(v));
    }
    if (bits.size() != 11) throw std::invalid_argument("score has " + std::to_string(bits.size()) + " entries, expected 11");
    r.score = GraspScore::from_vector(bits);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(where + (r.id.empty() ? "" : " (" + r.id + ")") + ": " + e.what());
  }
  return r;
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Imprint: return "imprint";
    case Provenance::ShapenetStyle: return "shapenet_style";
    case Provenance::Generated: return "generated";
    case Provenance::Baseline: return "baseline";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& s) {
  for (Provenance p : kAllProvenance)
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

std::vector<std::pair<std::string, int>> Manifest::provenance_counts() const {
  std::vector<std::pair<std::string, int>> out;
  for (Provenance p : kAllProvenance) {
    const auto n = std::count_if(records.begin(), records.end(), [&](const GraspRecord& r) { return r.provenance == p; });
    out.emplace_back(to_string(p), static_cast<int>(n));
  }
  return out;
}

std::array<int, 2> Manifest::success_counts() const {
  std::array<int, 2> c{0, 0};
  for (const GraspRecord& r : records) ++c[r.score.success ? 1 : 0];
  return c;
}

json Manifest::to_json() const {
  json recs = json::array();
  for (const GraspRecord& r : records) recs.push_back(record_to_json(r));
  json prov = json::object();
  for (const auto& [k, n] : provenance_counts()) prov[k] = n;
  const auto s = success_counts();
  return {{"format", kFormat},
          {"version", version},
          {"name", name},
          {"records", recs},
          {"counts", {{"provenance", prov}, {"success", {{"0", s[0]}, {"1", s[1]}}}}}};
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  try {
    if (j.at("format").get<std::string>() != kFormat) throw ValidationError("manifest: wrong format tag");
    m.version = j.at("version").get<int>();
    if (m.version != kVersion) throw ValidationError("manifest: unsupported version " + std::to_string(m.version));
    m.name = j.at("name").get<std::string>();
    const json& recs = j.at("records");
    if (!recs.is_array()) throw ValidationError("manifest: records is not a list");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      GraspRecord r = record_from_json(recs[i], i);
      if (!ids.insert(r.id).second) throw ValidationError("manifest: duplicate record id " + r.id);
      m.records.push_back(std::move(r));
    }
    const json& counts = j.at("counts");
    for (const auto& [k, n] : m.provenance_counts())
      if (counts.at("provenance").at(k).get<int>() != n)
        throw ValidationError("manifest: provenance count for " + k + " disagrees with records");
    const auto s = m.success_counts();
    if (counts.at("success").at("0").get<int>() != s[0] || counts.at("success").at("1").get<int>() != s[1])
      throw ValidationError("manifest: success counts disagree with records");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::string config_hash(const graspsim::SceneConfig& cfg) {
  json j;
  to_json(j, cfg);
  return hex64(fnv1a(j.dump()));
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---- dataset ----

Dataset::Dataset(Dataset&& other) noexcept : dir_(std::move(other.dir_)), manifest_(std::move(other.manifest_)) {}

Dataset Dataset::open(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  std::ifstream in(mp);
  if (!in) throw std::runtime_error("no dataset manifest at " + mp.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest " + mp.string() + " is not valid JSON: " + e.what());
  }
  return Dataset(dir, Manifest::from_json(j));
}

Dataset Dataset::open_or_create(const fs::path& dir, const std::string& name) {
  if (fs::exists(dir / "manifest.json")) return open(dir);
  fs::create_directories(dir / "volumes");
  Manifest m;
  m.name = name;
  Dataset d(dir, std::move(m));
  d.write_manifest();
  return d;
}

void Dataset::write_manifest() const { write_atomic(dir_ / "manifest.json", manifest_.to_json().dump(1) + "\n"); }

const GraspRecord& Dataset::append(const std::string& object_id, const TsdfVolume& object, const Finger& left,
                                   const Finger& right, const GraspScore& score, Provenance provenance,
                                   const std::string& cfg_hash) {
  if (score.as_vector().size() != 11) throw std::invalid_argument("grasp score must have 11 entries");
  if (left.handedness != fingerforge::Handedness::Left || right.handedness != fingerforge::Handedness::Right)
    throw std::invalid_argument("append expects a left and a right finger");
  std::lock_guard lock(mu_);
  GraspRecord r;
  char id[32];
  std::snprintf(id, sizeof id, "r%06zu", manifest_.records.size());
  r.id = id;
  r.object_id = object_id;
  r.object_file = "volumes/" + r.id + "_o.tsdf";
  r.left_file = "volumes/" + r.id + "_l.tsdf";
  r.right_file = "volumes/" + r.id + "_r.tsdf";
  r.score = score;
  r.provenance = provenance;
  r.config_hash = cfg_hash;
  fs::create_directories(dir_ / "volumes");
  auto put = [&](const TsdfVolume& v, const std::string& rel) {
    const auto bytes = voxelgrid::encode_volume(v);
    write_atomic(dir_ / rel, std::string(bytes.begin(), bytes.end()));
  };
  put(object, r.object_file);
  put(left.volume, r.left_file);
  put(right.volume, r.right_file);
  manifest_.records.push_back(std::move(r));
  try {
    write_manifest();
  } catch (...) {
    manifest_.records.pop_back();
    throw;
  }
  return manifest_.records.back();
}

void Dataset::truncate(std::size_t n) {
  std::lock_guard lock(mu_);
  if (n >= manifest_.records.size()) return;
  const std::vector<GraspRecord> dropped(manifest_.records.begin() + static_cast<std::ptrdiff_t>(n),
                                         manifest_.records.end());
  manifest_.records.resize(n);
  write_manifest();
  for (const GraspRecord& r : dropped)
    for (const std::string* f : {&r.object_file, &r.left_file, &r.right_file}) fs::remove(dir_ / *f);
}

RecordVolumes Dataset::load(const GraspRecord& r) const {
  auto get = [&](const std::string& rel) {
    const fs::path p = dir_ / rel;
    if (!fs::exists(p)) throw ValidationError(record_context(r) + ": missing volume " + rel);
    try {
      return voxelgrid::read_volume(p);
    } catch (const std::exception& e) {
      throw ValidationError(record_context(r) + ": " + rel + ": " + e.what());
    }
  };
  RecordVolumes out{get(r.object_file), Finger{get(r.left_file), fingerforge::Handedness::Left},
                    Finger{get(r.right_file), fingerforge::Handedness::Right}};
  if (out.left.volume.dims() != out.object.dims() || out.right.volume.dims() != out.object.dims())
    throw ValidationError(record_context(r) + ": volume dims differ");
  return out;
}

const GraspRecord& Dataset::find(const std::string& id) const {
  for (const GraspRecord& r : manifest_.records)
    if (r.id == id) return r;
  throw std::out_of_range("no record " + id);
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d = Dataset::open(dir);
  for (const GraspRecord& r : d.records()) d.load(r);
  return d;
}

Split split(const std::vector<GraspRecord>& records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw std::invalid_argument("train fraction must be in [0, 1]");
  // Objects in first-appearance order, then a seeded Fisher-Yates shuffle.
  std::vector<std::string> objects;
  std::map<std::string, std::size_t> slot;
  for (const GraspRecord& r : records)
    if (slot.emplace(r.object_id, objects.size()).second) objects.push_back(r.object_id);
  std::mt19937_64 rng(seed);
  for (std::size_t i = objects.size(); i > 1; --i) std::swap(objects[i - 1], objects[rng() % i]);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(objects.size())));
  const std::set<std::string> train_objects(objects.begin(), objects.begin() + static_cast<std::ptrdiff_t>(n_train));
  Split s;
  for (std::size_t i = 0; i < records.size(); ++i)
    (train_objects.count(records[i].object_id) ? s.train : s.test).push_back(i);
  return s;
}

// ---- synthetic objects ----

namespace {

using P3 = std::array<double, 3>;
using Sdf = std::function<double(const P3&)>;

double len3(double x, double y, double z) { return std::sqrt(x * x + y * y + z * z); }

Sdf box_sdf(P3 center, P3 half) {
  return [=](const P3& p) {
    const double qx = std::abs(p[0] - center[0]) - half[0];
    const double qy = std::abs(p[1] - center[1]) - half[1];
    const double qz = std::abs(p[2] - center[2]) - half[2];
    return len3(std::max(qx, 0.0), std::max(qy, 0.0), std::max(qz, 0.0)) + std::min(std::max({qx, qy, qz}), 0.0);
  };
}

Sdf sphere_sdf(P3 center, double r) {
  return [=](const P3& p) { return len3(p[0] - center[0], p[1] - center[1], p[2] - center[2]) - r; };
}

// Axis index `a` runs along the cylinder.
Sdf cylinder_sdf(P3 center, double r, double h, int a) {
  return [=](const P3& p) {
    const int u = (a + 1) % 3, v = (a + 2) % 3;
    const double dr = std::hypot(p[u] - center[u], p[v] - center[v]) - r;
    const double dh = std::abs(p[a] - center[a]) - h / 2;
    return std::min(std::max(dr, dh), 0.0) + std::hypot(std::max(dr, 0.0), std::max(dh, 0.0));
  };
}

Sdf union_sdf(std::vector<Sdf> parts) {
  return [parts = std::move(parts)](const P3& p) {
    double d = std::numeric_limits<double>::infinity();
    for (const Sdf& f : parts) d = std::min(d, f(p));
    return d;
  };
}

void require_positive(std::initializer_list<double> vals, const char* what) {
  for (double v : vals)
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("degenerate ") + what + " parameters");
}

Sdf make_sdf(ShapeKind kind, const SynthParams& p, std::uint64_t seed) {
  const auto& s = p.size;
  switch (kind) {
    case ShapeKind::Box:
      require_positive({s[0], s[1], s[2]}, "box");
      return box_sdf({0, 0, 0}, {s[0] / 2, s[1] / 2, s[2] / 2});
    case ShapeKind::Sphere:
      require_positive({p.radius}, "sphere");
      return sphere_sdf({0, 0, 0}, p.radius);
    case ShapeKind::Cylinder: {
      require_positive({p.radius, p.height}, "cylinder");
      const int a = p.axis == 'x' ? 0 : p.axis == 'y' ? 1 : p.axis == 'z' ? 2 : -1;
      if (a < 0) throw std::invalid_argument("cylinder axis must be x, y or z");
      return cylinder_sdf({0, 0, 0}, p.radius, p.height, a);
    }
    case ShapeKind::T:
    case ShapeKind::L: {
      require_positive({s[0], s[1], s[2], p.thickness}, kind == ShapeKind::T ? "T" : "L");
      const double t = p.thickness;
      if (t >= s[0] || t >= s[2]) throw std::invalid_argument("degenerate bar: thickness must be below length and height");
      // Foot along x on the ground, upright bar above it: centered for T, at
      // the -x end for L.
      const Sdf foot = box_sdf({0, 0, t / 2}, {s[0] / 2, s[1] / 2, t / 2});
      const double ux = kind == ShapeKind::T ? 0.0 : -s[0] / 2 + t / 2;
      const Sdf up = box_sdf({ux, 0, s[2] / 2}, {t / 2, s[1] / 2, s[2] / 2});
      return union_sdf({foot, up});
    }
    case ShapeKind::Ring: {
      require_positive({p.radius, p.tube_radius}, "ring");
      if (p.tube_radius >= p.radius) throw std::invalid_argument("degenerate ring: tube radius must be below ring radius");
      const double R = p.radius, r = p.tube_radius;
      return [=](const P3& q) { return std::hypot(std::hypot(q[0], q[1]) - R, q[2]) - r; };
    }
    case ShapeKind::Union: {
      require_positive({p.radius, static_cast<double>(p.primitives)}, "union");
      // Every primitive contains the origin, so the union is one body.
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> off(-0.3 * p.radius, 0.3 * p.radius);
      std::uniform_real_distribution<double> ext(0.4 * p.radius, 0.8 * p.radius);
      std::vector<Sdf> parts;
      for (int i = 0; i < p.primitives; ++i) {
        const int which = static_cast<int>(rng() % 3);
        const P3 c{off(rng), off(rng), off(rng)};
        if (which == 0) {
          parts.push_back(box_sdf(c, {ext(rng), ext(rng), ext(rng)}));
        } else if (which == 1) {
          parts.push_back(sphere_sdf(c, ext(rng)));
        } else {
          const double r = ext(rng), h = 2 * ext(rng);
          parts.push_back(cylinder_sdf(c, r, h, static_cast<int>(rng() % 3)));
        }
      }
      return union_sdf(std::move(parts));
    }
  }
  throw std::invalid_argument("unknown shape kind");
}

}  // namespace

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Box: return "box";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::T: return "T";
    case ShapeKind::L: return "L";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Union: return "union";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  for (ShapeKind k : {ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Sphere, ShapeKind::T, ShapeKind::L,
                      ShapeKind::Ring, ShapeKind::Union})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown shape kind '" + s + "'");
}

TsdfVolume synth_object(ShapeKind kind, const SynthParams& params, std::uint64_t seed) {
  const int n = params.resolution;
  if (n <= 0) throw std::invalid_argument("resolution must be positive");
  const Sdf sdf = make_sdf(kind, params, seed);
  // Interior is decided on the stored float, exactly as occupancy_from_tsdf does.
  auto stored = [](double d) { return static_cast<float>(std::clamp(d / voxelgrid::kDefaultTruncVoxels, -1.0, 1.0)); };

  // Occupied voxel-center bounds on a lattice of spacing 1 through the shape
  // origin, searched over a window three bounds wide.
  std::array<int, 3> lo{n, n, n}, hi{-n - 1, -n - 1, -n - 1};
  for (int k = -n - n / 2; k < n + n / 2; ++k)
    for (int j = -n - n / 2; j < n + n / 2; ++j)
      for (int i = -n - n / 2; i < n + n / 2; ++i) {
        if (!(stored(sdf({i + 0.5, j + 0.5, k + 0.5})) < 0.0f)) continue;
        const std::array<int, 3> c{i, j, k};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], c[a]);
          hi[a] = std::max(hi[a], c[a]);
        }
      }
  if (hi[0] < lo[0]) throw std::invalid_argument("degenerate " + to_string(kind) + ": no voxel center inside");
  for (int a = 0; a < 3; ++a) {
    if (hi[a] - lo[a] + 1 > n)
      throw std::invalid_argument(to_string(kind) + " does not fit in a " + std::to_string(n) + "-voxel bound");
    if (lo[a] == -n - n / 2 || hi[a] == n + n / 2 - 1)
      throw std::invalid_argument(to_string(kind) + " is too large for the bound");
  }
  // Lattice cell c maps to grid voxel c + shift.
  std::array<int, 3> shift{};
  for (int a = 0; a < 2; ++a) shift[a] = (n - (hi[a] - lo[a] + 1)) / 2 - lo[a];
  shift[2] = -lo[2];

  TsdfVolume v(GridGeometry::cube(n));
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double d = sdf({i - shift[0] + 0.5, j - shift[1] + 0.5, k - shift[2] + 0.5});
        v.set(i, j, k, stored(d));
      }
  return v;
}

std::vector<SynthItem> synth_corpus(int count, int resolution, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("corpus size must be non-negative");
  const double s = resolution / 40.0;
  std::mt19937_64 rng(seed);
  auto U = [&](double a, double b) { return std::uniform_real_distribution<double>(a * s, b * s)(rng); };
  const std::array<ShapeKind, 7> kinds{ShapeKind::Sphere, ShapeKind::Cylinder, ShapeKind::T,  ShapeKind::Ring,
                                       ShapeKind::L,      ShapeKind::Union,    ShapeKind::Box};
  std::vector<SynthItem> out;
  for (int i = 0; i < count; ++i) {
    SynthItem it;
    char id[32];
    std::snprintf(id, sizeof id, "obj%04d", i);
    it.id = id;
    it.kind = kinds[static_cast<std::size_t>(i) % kinds.size()];
    it.seed = rng();
    SynthParams& p = it.params;
    p.resolution = resolution;
    switch (it.kind) {
      case ShapeKind::Sphere: p.radius = U(6, 12); break;
      case ShapeKind::Cylinder:
        p.radius = U(5, 9);
        p.height = U(14, 28);
        p.axis = "xyz"[rng() % 3];
        break;
      case ShapeKind::T:
      case ShapeKind::L:
        p.size = {U(18, 30), U(8, 16), U(14, 26)};
        p.thickness = std::max(2.0, U(5, 8));
        break;
      case ShapeKind::Ring:
        p.radius = U(8, 12);
        p.tube_radius = std::max(1.5, U(2.5, 4));
        break;
      case ShapeKind::Union:
        p.radius = U(8, 14);
        p.primitives = 2 + static_cast<int>(rng() % 3);
        break;
      case ShapeKind::Box: p.size = {U(10, 24), U(10, 24), U(10, 24)}; break;
    }
    out.push_back(it);
  }
  return out;
}

TsdfVolume import_volume(const fs::path& path) {
  TsdfVolume v = voxelgrid::read_volume(path);
  const auto& d = v.dims();
  if (d.x != d.y || d.y != d.z) throw voxelgrid::FormatError(path.string() + ": volume is not cubic");
  if (d.x % 2 != 0) throw voxelgrid::FormatError(path.string() + ": side must be even");
  return v;
}

}  // namespace gripgen::datastore
