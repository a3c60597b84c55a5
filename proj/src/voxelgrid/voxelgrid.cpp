#include "gripgen/voxelgrid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace gripgen::voxelgrid {

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

GridGeometry canonical(GridGeometry g) {
  g.voxel_size = to_f32(g.voxel_size);
  for (double& o : g.origin) o = to_f32(o);
  return g;
}

float clamp_unit(float v) { return std::clamp(v, -1.0f, 1.0f); }

}  // namespace

GridGeometry GridGeometry::cube(int resolution, Vec3 origin) {
  GridGeometry g;
  g.dims = {resolution, resolution, resolution};
  g.voxel_size = kBoundMeters / resolution;
  g.origin = origin;
  return canonical(g);
}

TsdfVolume::TsdfVolume(GridGeometry geometry, float fill)
    : geometry_(canonical(geometry)) {
  if (!geometry_.dims.valid()) throw DimensionError("volume dims must be positive");
  values_.assign(geometry_.dims.count(), clamp_unit(fill));
}

TsdfVolume::TsdfVolume(GridGeometry geometry, std::vector<float> values)
    : geometry_(canonical(geometry)), values_(std::move(values)) {
  if (!geometry_.dims.valid()) throw DimensionError("volume dims must be positive");
  if (values_.size() != geometry_.dims.count()) {
    throw DimensionError("value count does not match volume dims");
  }
  for (float& v : values_) v = clamp_unit(v);
}

void TsdfVolume::set(int i, int j, int k, float v) {
  values_[geometry_.dims.index(i, j, k)] = clamp_unit(v);
}

bool operator==(const TsdfVolume& a, const TsdfVolume& b) {
  if (a.geometry_.dims != b.geometry_.dims || a.geometry_.voxel_size != b.geometry_.voxel_size ||
      a.geometry_.origin != b.geometry_.origin) {
    return false;
  }
  // Bitwise comparison so that -0.0 and 0.0 are distinguished like the file bytes.
  return a.values_.size() == b.values_.size() &&
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
}

OccupancyGrid::OccupancyGrid(Dims dims, bool fill) : dims_(dims) {
  if (!dims.valid()) throw DimensionError("grid dims must be positive");
  bits_.assign(dims.count(), fill ? 1 : 0);
}

std::size_t OccupancyGrid::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

OccupancyGrid occupancy_from_tsdf(const TsdfVolume& v, double iso) {
  OccupancyGrid g(v.dims());
  const auto values = v.values();
  for (std::size_t i = 0; i < values.size(); ++i) g.set_index(i, values[i] < iso);
  return g;
}

DepthImage render_depth(const TsdfVolume& v, ViewAxis view_axis) {
  const Dims d = v.dims();
  DepthImage img(d.y, d.z, view_axis);
  for (int k = 0; k < d.z; ++k) {
    for (int j = 0; j < d.y; ++j) {
      for (int step = 0; step < d.x; ++step) {
        const int i = view_axis == ViewAxis::PlusX ? step : d.x - 1 - step;
        if (v.at(i, j, k) < 0.0f) {
          img.at(j, k) = step * v.voxel_size();
          break;
        }
      }
    }
  }
  return img;
}

TsdfVolume fuse_two_views(const DepthImage& front, const DepthImage& back,
                          const GridGeometry& geometry, double trunc) {
  const Dims d = geometry.dims;
  if (front.width != d.y || front.height != d.z || back.width != d.y || back.height != d.z) {
    throw DimensionError("depth images must cover the y-z face of the grid");
  }
  if (front.view_axis != ViewAxis::PlusX || back.view_axis != ViewAxis::MinusX) {
    throw DimensionError("fusion expects a +x front view and a -x back view");
  }
  if (!(trunc > 0.0)) throw std::invalid_argument("truncation distance must be positive");

  TsdfVolume out(geometry, 1.0f);
  const double vs = out.voxel_size();
  const double length = d.x * vs;
  for (int k = 0; k < d.z; ++k) {
    for (int j = 0; j < d.y; ++j) {
      const bool front_hit = front.hit(j, k);
      const bool back_hit = back.hit(j, k);
      if (!front_hit && !back_hit) continue;
      // A surface seen from only one side extends to the opposite face.
      const double enter = front_hit ? front.at(j, k) : 0.0;
      const double exit = back_hit ? length - back.at(j, k) : length;
      for (int i = 0; i < d.x; ++i) {
        const double xc = (i + 0.5) * vs;
        double sd;
        if (xc < enter) {
          sd = enter - xc;
        } else if (xc > exit) {
          sd = xc - exit;
        } else {
          sd = -std::min(xc - enter, exit - xc);
        }
        out.set(i, j, k, static_cast<float>(std::clamp(sd / trunc, -1.0, 1.0)));
      }
    }
  }
  return out;
}

TsdfVolume two_view_volume(const TsdfVolume& v) {
  return fuse_two_views(render_depth(v, ViewAxis::PlusX), render_depth(v, ViewAxis::MinusX),
                        v.geometry(), kDefaultTruncVoxels * v.voxel_size());
}

Labeling connected_components(const OccupancyGrid& g) {
  const Dims d = g.dims();
  Labeling out;
  out.dims = d;
  out.labels.assign(d.count(), 0);
  std::vector<std::size_t> stack;
  const std::size_t sx = 1, sy = static_cast<std::size_t>(d.x), sz = sy * d.y;
  for (std::size_t seed = 0; seed < d.count(); ++seed) {
    if (!g.at_index(seed) || out.labels[seed] != 0) continue;
    const int label = ++out.count;
    std::size_t size = 0;
    out.labels[seed] = label;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      ++size;
      const int i = static_cast<int>(idx % d.x);
      const int j = static_cast<int>((idx / d.x) % d.y);
      const int k = static_cast<int>(idx / sz);
      const auto visit = [&](bool inside, std::size_t n) {
        if (inside && g.at_index(n) && out.labels[n] == 0) {
          out.labels[n] = label;
          stack.push_back(n);
        }
      };
      visit(i > 0, idx - sx);
      visit(i + 1 < d.x, idx + sx);
      visit(j > 0, idx - sy);
      visit(j + 1 < d.y, idx + sy);
      visit(k > 0, idx - sz);
      visit(k + 1 < d.z, idx + sz);
    }
    out.sizes.push_back(size);
  }
  return out;
}

OccupancyGrid largest_component(const OccupancyGrid& g) {
  const Labeling lab = connected_components(g);
  OccupancyGrid out(g.dims());
  if (lab.count == 0) return out;
  int best = 1;
  for (int l = 2; l <= lab.count; ++l) {
    if (lab.sizes[l - 1] > lab.sizes[best - 1]) best = l;
  }
  for (std::size_t i = 0; i < lab.labels.size(); ++i) out.set_index(i, lab.labels[i] == best);
  return out;
}

TsdfVolume rotate_about_z(const TsdfVolume& v, double degrees) {
  if (!std::isfinite(degrees)) throw std::invalid_argument("rotation angle must be finite");
  if (degrees == 0.0) return v;
  const Dims d = v.dims();
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = 0.5 * (d.x - 1), cy = 0.5 * (d.y - 1);
  TsdfVolume out(v.geometry(), 1.0f);
  const auto sample = [&](int i, int j, int k) -> double {
    return d.contains(i, j, k) ? static_cast<double>(v.at(i, j, k)) : 1.0;
  };
  for (int k = 0; k < d.z; ++k) {
    for (int j = 0; j < d.y; ++j) {
      for (int i = 0; i < d.x; ++i) {
        // Inverse map: output voxel pulls from the source rotated by -angle.
        const double dx = i - cx, dy = j - cy;
        const double sx = c * dx + s * dy + cx;
        const double sy = -s * dx + c * dy + cy;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const double tx = sx - fx, ty = sy - fy;
        const double val = (1 - tx) * (1 - ty) * sample(x0, y0, k) + tx * (1 - ty) * sample(x0 + 1, y0, k) +
                           (1 - tx) * ty * sample(x0, y0 + 1, k) + tx * ty * sample(x0 + 1, y0 + 1, k);
        out.set(i, j, k, static_cast<float>(val));
      }
    }
  }
  return out;
}

std::size_t shifted_overlap(const OccupancyGrid& a, const Offset& offset, const OccupancyGrid& b) {
  const Dims da = a.dims(), db = b.dims();
  // Only the x-range of a that lands inside b needs scanning.
  const int i0 = std::max(0, -offset[0]), i1 = std::min(da.x, db.x - offset[0]);
  const int j0 = std::max(0, -offset[1]), j1 = std::min(da.y, db.y - offset[1]);
  const int k0 = std::max(0, -offset[2]), k1 = std::min(da.z, db.z - offset[2]);
  std::size_t n = 0;
  for (int k = k0; k < k1; ++k) {
    for (int j = j0; j < j1; ++j) {
      const std::uint8_t* ra = a.bits().data() + da.index(0, j, k);
      const std::uint8_t* rb = b.bits().data() + db.index(0, j + offset[1], k + offset[2]);
      for (int i = i0; i < i1; ++i) n += ra[i] & rb[i + offset[0]];
    }
  }
  return n;
}

TsdfVolume negate(const TsdfVolume& v) {
  TsdfVolume out = v;
  for (float& x : out.values()) x = -x;
  return out;
}

TsdfVolume slab_x(const TsdfVolume& v, int x0, int nx) {
  const Dims d = v.dims();
  if (x0 < 0 || nx <= 0 || x0 + nx > d.x) throw DimensionError("slab outside volume");
  GridGeometry g = v.geometry();
  g.dims.x = nx;
  g.origin[0] += x0 * v.voxel_size();
  TsdfVolume out(g);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < nx; ++i) out.set(i, j, k, v.at(x0 + i, j, k));
  return out;
}

std::pair<TsdfVolume, TsdfVolume> split_mid_x(const TsdfVolume& v) {
  if (v.dims().x % 2 != 0) throw DimensionError("split_mid_x requires an even x dimension");
  const int half = v.dims().x / 2;
  return {slab_x(v, 0, half), slab_x(v, half, half)};
}

TsdfVolume concat_x(std::span<const TsdfVolume* const> parts) {
  if (parts.empty()) throw DimensionError("nothing to concatenate");
  const Dims first = parts.front()->dims();
  int total = 0;
  for (const TsdfVolume* p : parts) {
    if (p->dims().y != first.y || p->dims().z != first.z) {
      throw DimensionError("concatenated volumes must share y/z dims");
    }
    total += p->dims().x;
  }
  GridGeometry g = parts.front()->geometry();
  g.dims.x = total;
  TsdfVolume out(g);
  int x0 = 0;
  for (const TsdfVolume* p : parts) {
    for (int k = 0; k < first.z; ++k)
      for (int j = 0; j < first.y; ++j)
        for (int i = 0; i < p->dims().x; ++i) out.set(x0 + i, j, k, p->at(i, j, k));
    x0 += p->dims().x;
  }
  return out;
}

namespace {

constexpr double kInf = 1e20;

// Squared 1D distance transform (Felzenszwalb & Huttenlocher), in place over a
// strided line.
void edt_1d(double* f, std::size_t n, std::size_t stride, std::vector<double>& buf_d,
            std::vector<int>& v, std::vector<double>& z) {
  buf_d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  const auto intersect = [&](std::size_t q, int p) {
    return ((f[q * stride] + static_cast<double>(q) * q) - (f[p * stride] + static_cast<double>(p) * p)) /
           (2.0 * (static_cast<double>(q) - p));
  };
  for (std::size_t q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = static_cast<int>(q);
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - v[k];
    buf_d[q] = dq * dq + f[v[k] * stride];
  }
  for (std::size_t q = 0; q < n; ++q) f[q * stride] = buf_d[q];
}

// Squared distance (in voxels) from every voxel to the nearest voxel whose
// bit equals `feature`.
std::vector<double> squared_distance_to(const OccupancyGrid& g, bool feature) {
  const Dims d = g.dims();
  std::vector<double> f(d.count());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = g.at_index(i) == feature ? 0.0 : kInf;
  std::vector<double> buf;
  std::vector<int> v;
  std::vector<double> z;
  const std::size_t sy = d.x, sz = static_cast<std::size_t>(d.x) * d.y;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j) edt_1d(&f[d.index(0, j, k)], d.x, 1, buf, v, z);
  for (int k = 0; k < d.z; ++k)
    for (int i = 0; i < d.x; ++i) edt_1d(&f[d.index(i, 0, k)], d.y, sy, buf, v, z);
  for (int j = 0; j < d.y; ++j)
    for (int i = 0; i < d.x; ++i) edt_1d(&f[d.index(i, j, 0)], d.z, sz, buf, v, z);
  return f;
}

}  // namespace

TsdfVolume signed_distance(const OccupancyGrid& g, const GridGeometry& geometry, double trunc_voxels) {
  if (g.dims() != geometry.dims) throw DimensionError("grid and geometry dims differ");
  const std::vector<double> to_inside = squared_distance_to(g, true);
  const std::vector<double> to_outside = squared_distance_to(g, false);
  std::vector<float> values(g.dims().count());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double sd;
    if (g.at_index(i)) {
      sd = to_outside[i] >= kInf ? -trunc_voxels : -(std::sqrt(to_outside[i]) - 0.5);
    } else {
      sd = to_inside[i] >= kInf ? trunc_voxels : std::sqrt(to_inside[i]) - 0.5;
    }
    values[i] = static_cast<float>(std::clamp(sd / trunc_voxels, -1.0, 1.0));
  }
  return TsdfVolume(geometry, std::move(values));
}

double iou(const OccupancyGrid& a, const OccupancyGrid& b) {
  if (a.dims() != b.dims()) throw DimensionError("iou of differently sized grids");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.dims().count(); ++i) {
    inter += a.at_index(i) && b.at_index(i);
    uni += a.at_index(i) || b.at_index(i);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

constexpr char kMagic[4] = {'T', 'S', 'D', 'F'};
constexpr std::size_t kHeaderBytes = 4 + 3 * 4 + 4 + 3 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[pos + b]) << (8 * b);
  return v;
}
float get_f32(std::span<const std::uint8_t> in, std::size_t pos) { return std::bit_cast<float>(get_u32(in, pos)); }

}  // namespace

std::vector<std::uint8_t> encode_volume(const TsdfVolume& v) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * v.values().size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, static_cast<std::uint32_t>(v.dims().x));
  put_u32(out, static_cast<std::uint32_t>(v.dims().y));
  put_u32(out, static_cast<std::uint32_t>(v.dims().z));
  put_f32(out, static_cast<float>(v.voxel_size()));
  for (double o : v.origin()) put_f32(out, static_cast<float>(o));
  for (float x : v.values()) put_f32(out, x);
  return out;
}

TsdfVolume decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("volume file truncated: header incomplete");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("bad magic: expected \"TSDF\"");
  }
  GridGeometry g;
  const std::uint32_t nx = get_u32(bytes, 4), ny = get_u32(bytes, 8), nz = get_u32(bytes, 12);
  constexpr std::uint32_t kMaxSide = 4096;
  if (nx == 0 || ny == 0 || nz == 0 || nx > kMaxSide || ny > kMaxSide || nz > kMaxSide) {
    throw FormatError("invalid volume dims");
  }
  g.dims = {static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)};
  g.voxel_size = get_f32(bytes, 16);
  for (int a = 0; a < 3; ++a) g.origin[a] = get_f32(bytes, 20 + 4 * a);
  if (!(g.voxel_size > 0.0) || !std::isfinite(g.voxel_size)) throw FormatError("invalid voxel size");
  const std::size_t expected = kHeaderBytes + 4 * g.dims.count();
  if (bytes.size() != expected) {
    std::ostringstream msg;
    msg << "volume file has " << bytes.size() << " bytes, expected " << expected;
    throw FormatError(msg.str());
  }
  std::vector<float> values(g.dims.count());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float x = get_f32(bytes, kHeaderBytes + 4 * i);
    if (!(x >= -1.0f && x <= 1.0f)) {
      std::ostringstream msg;
      msg << "value " << x << " out of range [-1,1] at voxel index " << i;
      throw FormatError(msg.str());
    }
    values[i] = x;
  }
  return TsdfVolume(g, std::move(values));
}

void write_volume(const TsdfVolume& v, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_volume(v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TsdfVolume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace gripgen::voxelgrid
