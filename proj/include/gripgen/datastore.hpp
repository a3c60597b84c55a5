#pragma once

// Grasp-record datasets on disk, synthetic target objects and volume import.
//
// A dataset is a directory holding manifest.json and volumes/<record>_{o,l,r}.tsdf.
// Volumes are written before the manifest, so a crash mid-append leaves at most
// unreferenced files behind.

#include <array>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gripgen/fingerforge.hpp"
#include "gripgen/graspsim.hpp"
#include "gripgen/voxelgrid.hpp"

namespace gripgen::datastore {

using fingerforge::Finger;
using graspsim::GraspScore;
using voxelgrid::TsdfVolume;

/// Dataset content that fails validation. The message names the offending record.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Provenance { Imprint, ShapenetStyle, Generated, Baseline };
std::string to_string(Provenance p);
/// Throws std::invalid_argument for unknown tags.
Provenance provenance_from_string(const std::string& s);

struct GraspRecord {
  /// Assigned on append, unique within the dataset.
  std::string id;
  std::string object_id;
  /// Relative to the dataset directory.
  std::string object_file;
  std::string left_file;
  std::string right_file;
  GraspScore score;
  Provenance provenance = Provenance::Imprint;
  std::string config_hash;

  friend bool operator==(const GraspRecord&, const GraspRecord&) = default;
};

struct Manifest {
  static constexpr int kVersion = 1;

  std::string name;
  int version = kVersion;
  std::vector<GraspRecord> records;

  /// Keyed by provenance tag.
  std::vector<std::pair<std::string, int>> provenance_counts() const;
  /// [fail count, success count].
  std::array<int, 2> success_counts() const;

  nlohmann::json to_json() const;
  /// Throws ValidationError on schema problems or counts that disagree with the records.
  static Manifest from_json(const nlohmann::json& j);
};

struct RecordVolumes {
  TsdfVolume object;
  Finger left;
  Finger right;
};

/// Stable hex digest of a scene configuration, stored with every record.
std::string config_hash(const graspsim::SceneConfig& cfg);

class Dataset {
 public:
  /// Opens `dir`, creating an empty dataset named `name` if it has no manifest.
  static Dataset open_or_create(const std::filesystem::path& dir, const std::string& name);
  /// Reads the manifest only; see load_dataset for full validation.
  static Dataset open(const std::filesystem::path& dir);

  Dataset(Dataset&& other) noexcept;

  const std::filesystem::path& dir() const { return dir_; }
  const Manifest& manifest() const { return manifest_; }
  const std::vector<GraspRecord>& records() const { return manifest_.records; }
  std::size_t size() const { return manifest_.records.size(); }

  /// Writes the three volumes, then rewrites the manifest. Appends from
  /// several threads are serialized.
  const GraspRecord& append(const std::string& object_id, const TsdfVolume& object, const Finger& left,
                            const Finger& right, const GraspScore& score, Provenance provenance,
                            const std::string& config_hash);

  /// Keeps the first `n` records and rewrites the manifest. Volume files of
  /// dropped records are removed after the manifest no longer names them.
  void truncate(std::size_t n);

  /// Throws ValidationError naming the record if a file is missing or corrupt.
  RecordVolumes load(const GraspRecord& record) const;
  const GraspRecord& find(const std::string& id) const;

 private:
  Dataset(std::filesystem::path dir, Manifest m) : dir_(std::move(dir)), manifest_(std::move(m)) {}
  void write_manifest() const;

  std::filesystem::path dir_;
  Manifest manifest_;
  std::mutex mu_;
};

/// Opens the dataset and checks every referenced volume (existence, format,
/// equal dims within a record, score length 11).
Dataset load_dataset(const std::filesystem::path& dir);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Record indices partitioned by object id, so all records of one object land
/// on the same side. round(train_fraction * objects) objects go to train.
/// Deterministic in `seed`; both lists are sorted.
Split split(const std::vector<GraspRecord>& records, double train_fraction, std::uint64_t seed);

// ---- synthetic objects ----

enum class ShapeKind { Box, Cylinder, Sphere, T, L, Ring, Union };
std::string to_string(ShapeKind k);
ShapeKind shape_kind_from_string(const std::string& s);

/// All lengths in voxels. Each kind reads only its own fields:
///   box       size
///   sphere    radius
///   cylinder  radius, height, axis ('z' upright, 'x' or 'y' lying)
///   T         size = {bar length, depth, total height}, thickness
///   L         size = {foot length, depth, total height}, thickness
///   ring      radius (centerline), tube_radius; lies flat
///   union     primitives, radius (rough overall size), drawn from the seed
struct SynthParams {
  int resolution = voxelgrid::kDefaultResolution;
  std::array<double, 3> size{20.0, 20.0, 20.0};
  double radius = 10.0;
  double height = 20.0;
  char axis = 'z';
  double thickness = 6.0;
  double tube_radius = 3.0;
  int primitives = 3;
};

/// Analytic signed distance sampled at voxel centers, normalized by the
/// default truncation and clamped. The result rests on the ground (lowest
/// occupied layer is z = 0) and is centered in x and y. Throws
/// std::invalid_argument for degenerate or oversized parameters.
TsdfVolume synth_object(ShapeKind kind, const SynthParams& params, std::uint64_t seed = 0);

struct SynthItem {
  std::string id;
  ShapeKind kind;
  SynthParams params;
  std::uint64_t seed = 0;
};

/// A mixed-kind corpus with parameters drawn from `seed`, sized for `resolution`.
std::vector<SynthItem> synth_corpus(int count, int resolution, std::uint64_t seed);

/// Reads a volume written elsewhere. Besides the format checks of
/// read_volume, requires a cubic grid with an even side.
TsdfVolume import_volume(const std::filesystem::path& path);

/// Writes bytes to `path` through a temporary file and a rename.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace gripgen::datastore
