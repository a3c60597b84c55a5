#pragma once

// Quasi-static voxel grasp evaluator. A finger pair closes on an object in a
// (left | object | right) world, then lift, force-stability and
// orientation-robustness tests reduce to overlap and friction-budget checks.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gripgen/fingerforge.hpp"
#include "gripgen/voxelgrid.hpp"

namespace gripgen::graspsim {

using fingerforge::Finger;
using voxelgrid::OccupancyGrid;
using voxelgrid::Offset;
using voxelgrid::TsdfVolume;

struct SceneConfig {
  double object_mass = 0.05;  // kg
  double gravity = 9.81;
  double object_lateral_friction = 0.2;
  double object_rolling_friction = 0.001;  // kept for completeness, unused
  double finger_lateral_friction = 1.0;
  double finger_rolling_friction = 1.0;  // unused
  double grasp_force = 1.0;  // N
  double stability_force = 1.5;  // N
  std::vector<double> robustness_angles{-30, -20, -10, 10, 20, 30};  // degrees about +z
  std::array<double, 2> position_offset{0.0, 0.0};  // meters, x and y

  /// Throws std::invalid_argument on negative physics or an empty angle list.
  void validate() const;
  double interface_friction() const { return object_lateral_friction * finger_lateral_friction; }
  /// Largest tangential load the two-sided squeeze can carry.
  double friction_capacity() const { return 2.0 * interface_friction() * grasp_force; }
  double weight() const { return object_mass * gravity; }

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
/// Missing keys keep defaults; unknown keys and bad values throw
/// std::invalid_argument.
void from_json(const nlohmann::json& j, SceneConfig& c);

enum class Side { Left = 0, Right = 1 };

/// Object voxel `voxel` (world frame) touches a finger voxel at voxel + direction.
struct Contact {
  Offset voxel{};
  Offset direction{};
  int axis() const { return direction[0] != 0 ? 0 : direction[1] != 0 ? 1 : 2; }
};

/// The 3N x N x N side-by-side frame. Each body keeps its local N^3 grid and
/// an x placement: left at left_advance, object at N + object_shift, right at
/// 2N - right_advance.
struct SceneWorld {
  OccupancyGrid left, object, right;
  int n = 0;
  int left_advance = 0;
  int right_advance = 0;
  int object_shift = 0;

  int left_x() const { return left_advance; }
  int object_x() const { return n + object_shift; }
  int right_x() const { return 2 * n - right_advance; }

  /// Composite occupancy of all three bodies.
  OccupancyGrid grid() const;
  /// Would the object, moved by `delta`, overlap either finger?
  bool object_blocked(const Offset& delta) const;
};

/// Builds the zero-advance world. The position offset is applied to the
/// object here, clipped to its bound.
SceneWorld make_world(const TsdfVolume& object, const Finger& left, const Finger& right,
                      const SceneConfig& cfg = {});

/// The (left | object | right) TSDF frame also fed to the fitness model.
TsdfVolume scene_frame(const TsdfVolume& object, const Finger& left, const Finger& right);

struct ClosedState {
  SceneWorld world;
  /// A finger overlapped the object before moving. Nothing else is valid then.
  bool premature_collision = false;
  std::array<bool, 2> jammed{false, false};
  std::array<std::vector<Contact>, 2> contacts;
  /// Each finger presses on the object along x from its own side.
  bool both_sides_contact = false;

  int advance(Side s) const { return s == Side::Left ? world.left_advance : world.right_advance; }
  int displacement() const { return world.object_shift; }
};

ClosedState close(const TsdfVolume& object, const Finger& left, const Finger& right,
                  const SceneConfig& cfg = {});
/// Same, starting from an already built world.
ClosedState close(SceneWorld world);

struct LiftClauses {
  bool down_block = false;
  bool friction_hold = false;
  bool success() const { return down_block || friction_hold; }
};

LiftClauses lift_clauses(const ClosedState& state, const SceneConfig& cfg);
bool lift_success(const ClosedState& state, const SceneConfig& cfg);

/// Unit force directions: straight down, then three at 120 degree spacing
/// with z = +1/3, the first aligned with +x.
std::array<std::array<double, 3>, 4> stability_directions();

std::array<bool, 4> stability(const ClosedState& state, const SceneConfig& cfg);

std::vector<bool> robustness(const TsdfVolume& object, const Finger& left, const Finger& right,
                             const SceneConfig& cfg = {});

struct GraspScore {
  bool success = false;
  std::array<bool, 4> stability{};
  std::vector<bool> robustness = std::vector<bool>(6, false);

  /// [success, stability..., robustness...]; 11 entries for the default angles.
  std::vector<float> as_vector() const;
  static GraspScore zero(std::size_t angles = 6);
  static GraspScore from_vector(std::span<const float> v);

  friend bool operator==(const GraspScore&, const GraspScore&) = default;
};

GraspScore grasp_quality(const TsdfVolume& object, const Finger& left, const Finger& right,
                         const SceneConfig& cfg = {});

/// Score plus the diagnostics of the unrotated grasp.
struct EvaluationReport {
  GraspScore score;
  bool feasible = false;
  std::array<int, 2> advances{0, 0};
  int displacement = 0;
  std::array<std::size_t, 2> contact_counts{0, 0};
  LiftClauses clauses;

  nlohmann::json to_json() const;
};

EvaluationReport evaluate(const TsdfVolume& object, const Finger& left, const Finger& right,
                          const SceneConfig& cfg = {});

std::vector<GraspScore> perturbation_sweep(const TsdfVolume& object, const Finger& left, const Finger& right,
                                           std::span<const SceneConfig> variants);

/// Plug point for a different physics engine.
class EvaluatorBackend {
 public:
  virtual ~EvaluatorBackend() = default;
  virtual EvaluationReport evaluate(const TsdfVolume& object, const Finger& left, const Finger& right,
                                    const SceneConfig& cfg) const = 0;
};

class QuasiStaticBackend final : public EvaluatorBackend {
 public:
  EvaluationReport evaluate(const TsdfVolume& object, const Finger& left, const Finger& right,
                            const SceneConfig& cfg) const override;
};

struct EvaluationJob {
  std::string object_id;
  std::string variant_id;
  const TsdfVolume* object = nullptr;
  const Finger* left = nullptr;
  const Finger* right = nullptr;
  SceneConfig config;
};

/// Evaluates jobs on `workers` threads. Results are in job order and do not
/// depend on the worker count.
std::vector<EvaluationReport> evaluate_batch(std::span<const EvaluationJob> jobs, int workers = 1,
                                             const EvaluatorBackend& backend = QuasiStaticBackend{});

/// object_id,variant_id,success,s1..s4,r1..rk
void write_batch_csv(std::ostream& out, std::span<const EvaluationJob> jobs,
                     std::span<const EvaluationReport> reports);

/// Offsets in meters truncated toward zero to whole voxels.
std::array<int, 2> offset_voxels(const std::array<double, 2>& offset, double voxel_size);

}  // namespace gripgen::graspsim
