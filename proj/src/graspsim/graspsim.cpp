#include "gripgen/graspsim.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <ostream>
#include <set>
#include <stdexcept>
#include <thread>

namespace gripgen::graspsim {

using voxelgrid::Dims;
using voxelgrid::occupancy_from_tsdf;
using voxelgrid::shifted_overlap;

namespace {

constexpr double kAxisEps = 1e-9;

bool overlaps(const OccupancyGrid& a, const Offset& o, const OccupancyGrid& b) { return shifted_overlap(a, o, b) > 0; }

// Object footprint along world x, or nullopt if empty.
std::optional<std::array<int, 2>> x_extent(const OccupancyGrid& g) {
  const Dims d = g.dims();
  int lo = d.x, hi = -1;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        if (g.at(i, j, k)) {
          lo = std::min(lo, i);
          hi = std::max(hi, i);
        }
  if (hi < 0) return std::nullopt;
  return std::array<int, 2>{lo, hi};
}

OccupancyGrid shift_clipped(const OccupancyGrid& g, int dx, int dy) {
  if (dx == 0 && dy == 0) return g;
  const Dims d = g.dims();
  OccupancyGrid out(d);
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        if (g.at(i, j, k) && d.contains(i + dx, j + dy, k)) out.set(i + dx, j + dy, k, true);
  return out;
}

void check_nonneg(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be finite and >= 0");
}

std::vector<Contact> contacts_with(const SceneWorld& w, const OccupancyGrid& finger, int finger_x) {
  static constexpr std::array<Offset, 6> kDirs{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
  std::vector<Contact> out;
  const Dims d = w.object.dims();
  const int rel = w.object_x() - finger_x;
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i) {
        if (!w.object.at(i, j, k)) continue;
        for (const Offset& e : kDirs) {
          const int fi = i + rel + e[0], fj = j + e[1], fk = k + e[2];
          if (finger.dims().contains(fi, fj, fk) && finger.at(fi, fj, fk))
            out.push_back(Contact{{i + w.object_x(), j, k}, e});
        }
      }
  return out;
}

bool has_direction(const std::vector<Contact>& cs, const Offset& dir) {
  for (const Contact& c : cs)
    if (c.direction == dir) return true;
  return false;
}

}  // namespace

void SceneConfig::validate() const {
  check_nonneg(object_mass, "object_mass");
  check_nonneg(gravity, "gravity");
  check_nonneg(object_lateral_friction, "object_lateral_friction");
  check_nonneg(object_rolling_friction, "object_rolling_friction");
  check_nonneg(finger_lateral_friction, "finger_lateral_friction");
  check_nonneg(finger_rolling_friction, "finger_rolling_friction");
  check_nonneg(grasp_force, "grasp_force");
  check_nonneg(stability_force, "stability_force");
  if (robustness_angles.empty()) throw std::invalid_argument("robustness_angles must not be empty");
  for (double a : robustness_angles)
    if (!std::isfinite(a)) throw std::invalid_argument("robustness angle must be finite");
  for (double o : position_offset)
    if (!std::isfinite(o)) throw std::invalid_argument("position_offset must be finite");
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"object_mass", c.object_mass},
                     {"gravity", c.gravity},
                     {"object_lateral_friction", c.object_lateral_friction},
                     {"object_rolling_friction", c.object_rolling_friction},
                     {"finger_lateral_friction", c.finger_lateral_friction},
                     {"finger_rolling_friction", c.finger_rolling_friction},
                     {"grasp_force", c.grasp_force},
                     {"stability_force", c.stability_force},
                     {"robustness_angles", c.robustness_angles},
                     {"position_offset", c.position_offset}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("scene config must be a JSON object");
  static const std::set<std::string> known{"object_mass",
                                           "gravity",
                                           "object_lateral_friction",
                                           "object_rolling_friction",
                                           "finger_lateral_friction",
                                           "finger_rolling_friction",
                                           "grasp_force",
                                           "stability_force",
                                           "robustness_angles",
                                           "position_offset"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("unknown scene config key '" + key + "'");
  SceneConfig out;
  try {
    auto get = [&](const char* key, double& dst) {
      if (j.contains(key)) dst = j.at(key).get<double>();
    };
    get("object_mass", out.object_mass);
    get("gravity", out.gravity);
    get("object_lateral_friction", out.object_lateral_friction);
    get("object_rolling_friction", out.object_rolling_friction);
    get("finger_lateral_friction", out.finger_lateral_friction);
    get("finger_rolling_friction", out.finger_rolling_friction);
    get("grasp_force", out.grasp_force);
    get("stability_force", out.stability_force);
    if (j.contains("robustness_angles")) out.robustness_angles = j.at("robustness_angles").get<std::vector<double>>();
    if (j.contains("position_offset")) out.position_offset = j.at("position_offset").get<std::array<double, 2>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scene config: ") + e.what());
  }
  out.validate();
  c = std::move(out);
}

std::array<int, 2> offset_voxels(const std::array<double, 2>& offset, double voxel_size) {
  // A tiny slack keeps exact multiples (0.015 / 0.0015) from truncating down.
  auto q = [&](double m) { return static_cast<int>(std::trunc(m / voxel_size + (m >= 0 ? 1e-9 : -1e-9))); };
  return {q(offset[0]), q(offset[1])};
}

OccupancyGrid SceneWorld::grid() const {
  OccupancyGrid g(Dims{3 * n, n, n});
  auto place = [&](const OccupancyGrid& body, int x0) {
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          if (body.at(i, j, k) && x0 + i >= 0 && x0 + i < 3 * n) g.set(x0 + i, j, k, true);
  };
  place(left, left_x());
  place(object, object_x());
  place(right, right_x());
  return g;
}

bool SceneWorld::object_blocked(const Offset& delta) const {
  const int ox = object_x() + delta[0];
  return overlaps(object, {ox - left_x(), delta[1], delta[2]}, left) ||
         overlaps(object, {ox - right_x(), delta[1], delta[2]}, right);
}

SceneWorld make_world(const TsdfVolume& object, const Finger& left, const Finger& right, const SceneConfig& cfg) {
  const Dims d = object.dims();
  if (d.x != d.y || d.y != d.z) throw voxelgrid::DimensionError("scene bodies must be cubic");
  if (left.volume.dims() != d || right.volume.dims() != d)
    throw voxelgrid::DimensionError("finger and object bounds differ");
  if (d.x % 2 != 0) throw voxelgrid::DimensionError("scene bound must have an even side");
  SceneWorld w;
  w.n = d.x;
  const auto [ox, oy] = offset_voxels(cfg.position_offset, object.voxel_size());
  w.object = shift_clipped(occupancy_from_tsdf(object), ox, oy);
  w.left = occupancy_from_tsdf(left.volume);
  w.right = occupancy_from_tsdf(right.volume);
  return w;
}

TsdfVolume scene_frame(const TsdfVolume& object, const Finger& left, const Finger& right) {
  const std::array<const TsdfVolume*, 3> parts{&left.volume, &object, &right.volume};
  return voxelgrid::concat_x(parts);
}

ClosedState close(SceneWorld world) {
  ClosedState s;
  s.world = std::move(world);
  SceneWorld& w = s.world;
  if (w.object_blocked({0, 0, 0})) {
    s.premature_collision = true;
    s.jammed = {true, true};
    return s;
  }
  const int limit = w.n / 2;
  const auto extent = x_extent(w.object);

  // One advance attempt; returns false when the finger jams.
  auto step = [&](Side side) {
    const bool is_left = side == Side::Left;
    const OccupancyGrid& me = is_left ? w.left : w.right;
    const OccupancyGrid& other = is_left ? w.right : w.left;
    const int dir = is_left ? 1 : -1;
    const int my_x = (is_left ? w.left_x() : w.right_x()) + dir;
    const int other_x = is_left ? w.right_x() : w.left_x();
    if (overlaps(me, {my_x - other_x, 0, 0}, other)) return false;
    if (!overlaps(me, {my_x - w.object_x(), 0, 0}, w.object)) {
      (is_left ? w.left_advance : w.right_advance) += 1;
      return true;
    }
    // Push the object one voxel ahead of the finger.
    const int pushed_x = w.object_x() + dir;
    if (overlaps(w.object, {pushed_x - other_x, 0, 0}, other)) return false;
    if (extent && (pushed_x + (*extent)[0] < 0 || pushed_x + (*extent)[1] >= 3 * w.n)) return false;
    w.object_shift += dir;
    (is_left ? w.left_advance : w.right_advance) += 1;
    return true;
  };

  while (!(s.jammed[0] || w.left_advance >= limit) || !(s.jammed[1] || w.right_advance >= limit)) {
    if (!s.jammed[0] && w.left_advance < limit && !step(Side::Left)) s.jammed[0] = true;
    if (!s.jammed[1] && w.right_advance < limit && !step(Side::Right)) s.jammed[1] = true;
  }

  s.contacts[0] = contacts_with(w, w.left, w.left_x());
  s.contacts[1] = contacts_with(w, w.right, w.right_x());
  // The left finger pushes toward +x, so it sits at -x of the object voxel.
  s.both_sides_contact = has_direction(s.contacts[0], {-1, 0, 0}) && has_direction(s.contacts[1], {1, 0, 0});
  return s;
}

ClosedState close(const TsdfVolume& object, const Finger& left, const Finger& right, const SceneConfig& cfg) {
  return close(make_world(object, left, right, cfg));
}

LiftClauses lift_clauses(const ClosedState& state, const SceneConfig& cfg) {
  LiftClauses c;
  if (state.premature_collision || state.world.object.empty()) return c;
  c.down_block = state.world.object_blocked({0, 0, -1});
  c.friction_hold = state.both_sides_contact && cfg.friction_capacity() >= cfg.weight();
  return c;
}

bool lift_success(const ClosedState& state, const SceneConfig& cfg) { return lift_clauses(state, cfg).success(); }

std::array<std::array<double, 3>, 4> stability_directions() {
  const double r = std::sqrt(8.0) / 3.0;
  std::array<std::array<double, 3>, 4> dirs{};
  dirs[0] = {0.0, 0.0, -1.0};
  for (int i = 0; i < 3; ++i) {
    const double phi = i * 2.0 * M_PI / 3.0;
    dirs[i + 1] = {r * std::cos(phi), r * std::sin(phi), 1.0 / 3.0};
  }
  return dirs;
}

std::array<bool, 4> stability(const ClosedState& state, const SceneConfig& cfg) {
  std::array<bool, 4> bits{};
  if (!lift_success(state, cfg)) return bits;
  const bool friction_ok_base = state.both_sides_contact;
  const auto dirs = stability_directions();
  for (std::size_t t = 0; t < dirs.size(); ++t) {
    const std::array<double, 3> net{cfg.stability_force * dirs[t][0], cfg.stability_force * dirs[t][1],
                                    cfg.stability_force * dirs[t][2] - cfg.weight()};
    const bool friction_ok = friction_ok_base && cfg.friction_capacity() >= std::hypot(net[1], net[2]);
    bool held = true;
    for (int a = 0; a < 3 && held; ++a) {
      if (std::abs(net[a]) <= kAxisEps) continue;
      Offset delta{0, 0, 0};
      delta[a] = net[a] > 0 ? 1 : -1;
      if (state.world.object_blocked(delta)) continue;
      // A finger in contact on the far side stops x motion; that contact is
      // exactly an x block, so only y and z may fall back on friction.
      held = a != 0 && friction_ok;
    }
    bits[t] = held;
  }
  return bits;
}

std::vector<bool> robustness(const TsdfVolume& object, const Finger& left, const Finger& right, const SceneConfig& cfg) {
  std::vector<bool> bits;
  bits.reserve(cfg.robustness_angles.size());
  for (double angle : cfg.robustness_angles) {
    const TsdfVolume turned = voxelgrid::rotate_about_z(object, angle);
    bits.push_back(lift_success(close(turned, left, right, cfg), cfg));
  }
  return bits;
}

std::vector<float> GraspScore::as_vector() const {
  std::vector<float> v;
  v.reserve(5 + robustness.size());
  v.push_back(success ? 1.0f : 0.0f);
  for (bool b : stability) v.push_back(b ? 1.0f : 0.0f);
  for (bool b : robustness) v.push_back(b ? 1.0f : 0.0f);
  return v;
}

GraspScore GraspScore::zero(std::size_t angles) {
  GraspScore s;
  s.robustness.assign(angles, false);
  return s;
}

GraspScore GraspScore::from_vector(std::span<const float> v) {
  if (v.size() < 5) throw std::invalid_argument("grasp score vector needs at least 5 entries");
  GraspScore s = zero(v.size() - 5);
  s.success = v[0] >= 0.5f;
  for (int i = 0; i < 4; ++i) s.stability[i] = v[1 + i] >= 0.5f;
  for (std::size_t i = 5; i < v.size(); ++i) s.robustness[i - 5] = v[i] >= 0.5f;
  return s;
}

EvaluationReport evaluate(const TsdfVolume& object, const Finger& left, const Finger& right, const SceneConfig& cfg) {
  cfg.validate();
  EvaluationReport r;
  r.score = GraspScore::zero(cfg.robustness_angles.size());
  const fingerforge::FeasibilityCheck fl = fingerforge::check_feasibility(left);
  const fingerforge::FeasibilityCheck fr = fingerforge::check_feasibility(right);
  r.feasible = fl.report.feasible && fr.report.feasible;
  if (!r.feasible) return r;

  const ClosedState state = close(object, fl.repaired, fr.repaired, cfg);
  r.advances = {state.world.left_advance, state.world.right_advance};
  r.displacement = state.displacement();
  r.contact_counts = {state.contacts[0].size(), state.contacts[1].size()};
  r.clauses = lift_clauses(state, cfg);
  r.score.success = r.clauses.success();
  r.score.stability = stability(state, cfg);
  r.score.robustness = robustness(object, fl.repaired, fr.repaired, cfg);
  return r;
}

GraspScore grasp_quality(const TsdfVolume& object, const Finger& left, const Finger& right, const SceneConfig& cfg) {
  return evaluate(object, left, right, cfg).score;
}

nlohmann::json EvaluationReport::to_json() const {
  std::vector<int> bits;
  for (float f : score.as_vector()) bits.push_back(f >= 0.5f ? 1 : 0);
  return {{"score", bits},
          {"feasible", feasible},
          {"advances", advances},
          {"displacement", displacement},
          {"contact_counts", contact_counts},
          {"clauses", {{"down_block", clauses.down_block}, {"friction_hold", clauses.friction_hold}}}};
}

std::vector<GraspScore> perturbation_sweep(const TsdfVolume& object, const Finger& left, const Finger& right,
                                           std::span<const SceneConfig> variants) {
  std::vector<GraspScore> out;
  out.reserve(variants.size());
  for (const SceneConfig& v : variants) out.push_back(grasp_quality(object, left, right, v));
  return out;
}

EvaluationReport QuasiStaticBackend::evaluate(const TsdfVolume& object, const Finger& left, const Finger& right,
                                              const SceneConfig& cfg) const {
  return graspsim::evaluate(object, left, right, cfg);
}

std::vector<EvaluationReport> evaluate_batch(std::span<const EvaluationJob> jobs, int workers,
                                             const EvaluatorBackend& backend) {
  std::vector<EvaluationReport> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const EvaluationJob& j = jobs[i];
        if (!j.object || !j.left || !j.right) throw std::invalid_argument("evaluation job with missing volumes");
        out[i] = backend.evaluate(*j.object, *j.left, *j.right, j.config);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

void write_batch_csv(std::ostream& out, std::span<const EvaluationJob> jobs, std::span<const EvaluationReport> reports) {
  if (jobs.size() != reports.size()) throw std::invalid_argument("jobs and reports differ in length");
  std::size_t angles = reports.empty() ? 6 : reports.front().score.robustness.size();
  out << "object_id,variant_id,success,s1,s2,s3,s4";
  for (std::size_t i = 1; i <= angles; ++i) out << ",r" << i;
  out << "\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    out << jobs[i].object_id << "," << jobs[i].variant_id;
    for (float f : reports[i].score.as_vector()) out << "," << (f >= 0.5f ? 1 : 0);
    out << "\n";
  }
}

}  // namespace gripgen::graspsim
