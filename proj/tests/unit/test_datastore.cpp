#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "fixtures.hpp"
#include "gripgen/datastore.hpp"

using namespace gripgen;
using namespace gripgen::datastore;
namespace fs = std::filesystem;
using voxelgrid::occupancy_from_tsdf;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gripgen_test_" + name);
  fs::remove_all(d);
  return d;
}

GraspScore score_with(bool success, int seed) {
  GraspScore s = GraspScore::zero();
  s.success = success;
  for (int i = 0; i < 4; ++i) s.stability[i] = success && ((seed >> i) & 1);
  for (int i = 0; i < 6; ++i) s.robustness[i] = success && ((seed >> (i + 1)) & 1);
  return s;
}

struct Bounds {
  std::array<int, 3> lo{1 << 30, 1 << 30, 1 << 30};
  std::array<int, 3> hi{-1, -1, -1};
};

Bounds occupied_bounds(const TsdfVolume& v) {
  const auto g = occupancy_from_tsdf(v);
  Bounds b;
  const auto& d = g.dims();
  for (int k = 0; k < d.z; ++k)
    for (int j = 0; j < d.y; ++j)
      for (int i = 0; i < d.x; ++i)
        if (g.at(i, j, k)) {
          const std::array<int, 3> c{i, j, k};
          for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::min(b.lo[a], c[a]);
            b.hi[a] = std::max(b.hi[a], c[a]);
          }
        }
  return b;
}

void flip_byte(const fs::path& p, std::size_t at, std::uint8_t value) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(at));
  f.put(static_cast<char>(value));
}

}  // namespace

TEST_CASE("analytic object volumes") {
  SUBCASE("sphere of radius 10") {
    SynthParams p;
    p.radius = 10;
    const auto n = occupancy_from_tsdf(synth_object(ShapeKind::Sphere, p)).count();
    const double exact = 4.0 / 3.0 * std::numbers::pi * 1000.0;
    CHECK(std::abs(static_cast<double>(n) - exact) / exact <= 0.02);
  }
  SUBCASE("box of 20 cubed") {
    SynthParams p;
    p.size = {20, 20, 20};
    const TsdfVolume v = synth_object(ShapeKind::Box, p);
    CHECK(occupancy_from_tsdf(v).count() == 8000);
    // Centered in x and y, on the floor.
    CHECK(occupancy_from_tsdf(v) == occupancy_from_tsdf(fixtures::box_volume(40, {10, 10, 0}, {30, 30, 20})));
  }
  SUBCASE("flat ring has a hole") {
    SynthParams p;
    p.radius = 10;
    p.tube_radius = 3;
    const auto g = occupancy_from_tsdf(synth_object(ShapeKind::Ring, p));
    CHECK_FALSE(g.at(20, 20, 2));
    CHECK(g.at(30, 20, 2));
    CHECK(voxelgrid::connected_components(g).count == 1);
  }
  SUBCASE("T stands on its bar, L on its foot") {
    SynthParams p;
    p.size = {24, 10, 20};
    p.thickness = 6;
    const auto t = occupancy_from_tsdf(synth_object(ShapeKind::T, p));
    const auto l = occupancy_from_tsdf(synth_object(ShapeKind::L, p));
    // Bar spans x [8, 32) at the floor; the stem is 6 wide in the middle.
    CHECK(t.at(8, 20, 0));
    CHECK(t.at(31, 20, 0));
    CHECK_FALSE(t.at(8, 20, 10));
    CHECK(t.at(20, 20, 19));
    CHECK_FALSE(t.at(20, 20, 20));
    CHECK(l.at(8, 20, 19));
    CHECK_FALSE(l.at(31, 20, 19));
    CHECK(t.count() == 24 * 10 * 6 + 6 * 10 * 14);
    CHECK(l.count() == t.count());
  }
}

TEST_CASE("synthetic objects are deterministic") {
  for (const SynthItem& it : synth_corpus(7, 40, 5)) {
    CAPTURE(it.id);
    CHECK(synth_object(it.kind, it.params, it.seed) == synth_object(it.kind, it.params, it.seed));
  }
  const auto a = synth_corpus(10, 16, 9), b = synth_corpus(10, 16, 9);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].seed == b[i].seed);
  SynthParams p;
  p.radius = 10;
  p.primitives = 4;
  CHECK(synth_object(ShapeKind::Union, p, 1) != synth_object(ShapeKind::Union, p, 2));
}

TEST_CASE("every synthetic object rests on the floor, centered and in bound") {
  for (int res : {16, 40}) {
    for (const SynthItem& it : synth_corpus(42, res, 77)) {
      CAPTURE(res);
      CAPTURE(it.id);
      CAPTURE(to_string(it.kind));
      const TsdfVolume v = synth_object(it.kind, it.params, it.seed);
      REQUIRE(v.dims() == voxelgrid::Dims{res, res, res});
      const Bounds b = occupied_bounds(v);
      REQUIRE(b.hi[0] >= 0);
      CHECK(b.lo[2] == 0);
      for (int a = 0; a < 2; ++a) {
        // Equal margins up to one voxel of parity.
        const int before = b.lo[a], after = res - 1 - b.hi[a];
        CHECK(std::abs(before - after) <= 1);
      }
      for (float x : v.values()) REQUIRE((x >= -1.0f && x <= 1.0f));
      CHECK(voxelgrid::connected_components(occupancy_from_tsdf(v)).count == 1);
    }
  }
}

TEST_CASE("degenerate shapes are rejected") {
  SynthParams p;
  p.size = {0, 10, 10};
  CHECK_THROWS_AS(synth_object(ShapeKind::Box, p), std::invalid_argument);
  p = {};
  p.radius = 0;
  CHECK_THROWS_AS(synth_object(ShapeKind::Sphere, p), std::invalid_argument);
  p = {};
  p.radius = 0.2;  // no voxel center inside
  CHECK_THROWS_AS(synth_object(ShapeKind::Sphere, p), std::invalid_argument);
  p = {};
  p.radius = 21;
  CHECK_THROWS_AS(synth_object(ShapeKind::Sphere, p), std::invalid_argument);
  p = {};
  p.size = {10, 10, 10};
  p.thickness = 10;
  CHECK_THROWS_AS(synth_object(ShapeKind::T, p), std::invalid_argument);
  p = {};
  p.radius = 4;
  p.tube_radius = 4;
  CHECK_THROWS_AS(synth_object(ShapeKind::Ring, p), std::invalid_argument);
  p = {};
  p.axis = 'w';
  CHECK_THROWS_AS(synth_object(ShapeKind::Cylinder, p), std::invalid_argument);
  CHECK_THROWS_AS(shape_kind_from_string("cone"), std::invalid_argument);
}

TEST_CASE("dataset append, load and counts") {
  const fs::path dir = fresh_dir("dataset");
  const TsdfVolume obj = fixtures::sphere_volume(16, 4.0, {8, 8, 4});
  const auto [l, r] = fingerforge::make_imprint_pair(obj);
  const std::string h = config_hash(graspsim::SceneConfig{});
  {
    Dataset d = Dataset::open_or_create(dir, "unit");
    d.append("a", obj, l, r, score_with(true, 5), Provenance::Imprint, h);
    d.append("b", obj, l, r, score_with(false, 0), Provenance::Baseline, h);
    d.append("a", obj, l, r, score_with(true, 11), Provenance::Generated, h);
  }
  Dataset d = load_dataset(dir);
  REQUIRE(d.size() == 3);
  CHECK(d.manifest().success_counts() == std::array<int, 2>{1, 2});
  CHECK(d.manifest().name == "unit");
  CHECK(d.records()[2].score == score_with(true, 11));
  CHECK(d.records()[1].provenance == Provenance::Baseline);
  CHECK(d.find("r000001").object_id == "b");

  const RecordVolumes v = d.load(d.records()[0]);
  CHECK(v.object == obj);
  CHECK(v.left.volume == l.volume);
  CHECK(v.right.volume == r.volume);
  CHECK(v.right.handedness == fingerforge::Handedness::Right);

  // Manifest JSON carries the counts.
  std::ifstream in(dir / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["counts"]["success"]["1"] == 2);
  CHECK(j["counts"]["success"]["0"] == 1);
  CHECK(j["counts"]["provenance"]["imprint"] == 1);

  // Reopening and appending continues the id sequence.
  Dataset again = Dataset::open_or_create(dir, "ignored");
  CHECK(again.append("c", obj, l, r, score_with(false, 0), Provenance::Imprint, h).id == "r000003");
}

TEST_CASE("dataset validation names the record") {
  const fs::path dir = fresh_dir("dataset_bad");
  const TsdfVolume obj = fixtures::box_volume(8, {2, 2, 0}, {6, 6, 4});
  const auto [l, r] = fingerforge::make_imprint_pair(obj);
  {
    Dataset d = Dataset::open_or_create(dir, "bad");
    d.append("x", obj, l, r, score_with(false, 0), Provenance::Imprint, "0");
    d.append("y", obj, l, r, score_with(true, 3), Provenance::Imprint, "0");
  }
  SUBCASE("corrupt volume value") {
    flip_byte(dir / "volumes/r000001_l.tsdf", 32 + 3, 0x7f);  // a huge float
    try {
      load_dataset(dir);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("r000001") != std::string::npos);
      CHECK(std::string(e.what()).find("voxel index") != std::string::npos);
    }
  }
  SUBCASE("missing volume") {
    fs::remove(dir / "volumes/r000000_o.tsdf");
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("r000000"), ValidationError);
  }
  SUBCASE("counts that disagree") {
    nlohmann::json j;
    {
      std::ifstream in(dir / "manifest.json");
      j = nlohmann::json::parse(in);
    }
    j["counts"]["success"]["1"] = 2;
    std::ofstream(dir / "manifest.json") << j.dump();
    CHECK_THROWS_AS(Dataset::open(dir), ValidationError);
  }
  SUBCASE("score of the wrong length") {
    nlohmann::json j;
    {
      std::ifstream in(dir / "manifest.json");
      j = nlohmann::json::parse(in);
    }
    j["records"][1]["score"].erase(0);
    std::ofstream(dir / "manifest.json") << j.dump();
    CHECK_THROWS_WITH_AS(Dataset::open(dir), doctest::Contains("r000001"), ValidationError);
  }
  SUBCASE("orphan volumes from an interrupted append are harmless") {
    const auto bytes = voxelgrid::encode_volume(obj);
    write_atomic(dir / "volumes/r000002_o.tsdf", std::string(bytes.begin(), bytes.end()));
    CHECK(load_dataset(dir).size() == 2);
  }
}

TEST_CASE("split") {
  std::vector<GraspRecord> recs;
  for (int i = 0; i < 50; ++i) {
    GraspRecord r;
    r.id = std::to_string(i);
    r.object_id = "o" + std::to_string(i % 20);
    recs.push_back(r);
  }
  const Split a = split(recs, 0.8, 3), b = split(recs, 0.8, 3);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(a.train.size() + a.test.size() == recs.size());
  std::set<std::string> train_obj, test_obj;
  for (auto i : a.train) train_obj.insert(recs[i].object_id);
  for (auto i : a.test) test_obj.insert(recs[i].object_id);
  CHECK(train_obj.size() == 16);
  CHECK(test_obj.size() == 4);
  for (const auto& o : train_obj) CHECK(test_obj.count(o) == 0);
  CHECK(std::is_sorted(a.train.begin(), a.train.end()));
  const Split c = split(recs, 0.8, 4);
  CHECK((c.train != a.train));
  CHECK_THROWS_AS(split(recs, 1.5, 0), std::invalid_argument);
}

TEST_CASE("import volume") {
  const fs::path dir = fresh_dir("import");
  fs::create_directories(dir);
  const TsdfVolume v = fixtures::sphere_volume(8, 3.0, {4, 4, 3});
  voxelgrid::write_volume(v, dir / "a.tsdf");
  CHECK(import_volume(dir / "a.tsdf") == v);

  const auto bytes = voxelgrid::encode_volume(v);
  {
    std::ofstream out(dir / "short.tsdf", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() - 4));
  }
  CHECK_THROWS_AS(import_volume(dir / "short.tsdf"), voxelgrid::FormatError);

  {
    std::vector<std::uint8_t> b = bytes;
    const float big = 1.5f;
    std::memcpy(b.data() + 32 + 4 * 17, &big, 4);
    std::ofstream out(dir / "range.tsdf", std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  CHECK_THROWS_WITH_AS(import_volume(dir / "range.tsdf"), doctest::Contains("voxel index 17"), voxelgrid::FormatError);

  voxelgrid::GridGeometry g;
  g.dims = {8, 8, 4};
  voxelgrid::write_volume(TsdfVolume(g), dir / "flat.tsdf");
  CHECK_THROWS_AS(import_volume(dir / "flat.tsdf"), voxelgrid::FormatError);
}

TEST_CASE("config hash") {
  graspsim::SceneConfig a, b;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.grasp_force = 1.3;
  CHECK(config_hash(a) != config_hash(b));
}
