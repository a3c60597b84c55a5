#pragma once

// Candidate finger construction (imprint pairs, slice-and-stretch, flat
// blocks) and the manufacturability rules every finger must pass.

#include <filesystem>
#include <string>
#include <utility>

#include "gripgen/voxelgrid.hpp"

namespace gripgen::fingerforge {

using voxelgrid::TsdfVolume;

enum class Handedness { Left, Right };

/// Left fingers mount on their -x face, right fingers on their +x face.
enum class MountFace { MinusX, PlusX };

inline MountFace mount_face_of(Handedness h) { return h == Handedness::Left ? MountFace::MinusX : MountFace::PlusX; }
std::string to_string(Handedness h);
std::string to_string(MountFace m);
Handedness handedness_from_string(const std::string& s);

/// Minimum fraction of the mount face that the finger must cover.
inline constexpr double kMinBaseFraction = 0.10;

struct Finger {
  TsdfVolume volume;
  Handedness handedness = Handedness::Left;

  MountFace mount_face() const { return mount_face_of(handedness); }
  /// x index of the voxel layer touching the jaw.
  int mount_layer() const { return handedness == Handedness::Left ? 0 : volume.dims().x - 1; }
};

struct FeasibilityReport {
  /// Fraction of the mount face occupied by the largest component.
  double base_fraction = 0.0;
  /// Components left after largest-component repair (0 or 1).
  int component_count = 0;
  bool feasible = false;

  friend bool operator==(const FeasibilityReport&, const FeasibilityReport&) = default;
};

struct FeasibilityCheck {
  FeasibilityReport report;
  /// The finger reduced to its largest component. Identical to the input when
  /// nothing had to be removed.
  Finger repaired;
};

/// Largest-component repair followed by the base-connection test. Repair never
/// turns a weakly based finger into a feasible one.
FeasibilityCheck check_feasibility(const Finger& f);

/// Imprint fingers: the object's two-view TSDF is negated and split at the
/// x mid-plane; each half becomes the inner slab of one finger, backed by a
/// solid slab toward the mount face. Requires an even x dimension.
std::pair<Finger, Finger> make_imprint_pair(const TsdfVolume& object);

struct SliceResult {
  Finger finger;
  /// False when no plane in the third nearest the mount face is large enough;
  /// the input is then returned unchanged and should be rejected.
  bool qualified = false;
  /// Index of the plane that became the new mount face (-1 if none).
  int plane = -1;
};

SliceResult slice_and_stretch(const TsdfVolume& volume, Handedness handedness,
                              double area_threshold = kMinBaseFraction);

/// Solid slab of `thickness_voxels` against the mount face, spanning y and z.
Finger flat_block_finger(int thickness_voxels, Handedness handedness,
                         int resolution = voxelgrid::kDefaultResolution);

/// Writes `<path>` in the volume format plus `<path>.json` holding
/// {"handedness", "mount_face"}.
void write_finger(const Finger& f, const std::filesystem::path& path);
Finger read_finger(const std::filesystem::path& path);

}  // namespace gripgen::fingerforge
