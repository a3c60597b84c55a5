// gripgen: command-line entry point for the finger design pipeline.
//
// Every command prints one JSON document (stdout or --out). Failures print a
// single-line JSON error on stderr and exit 2 (config), 3 (input) or 4 (runtime).

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gripgen/datastore.hpp"
#include "gripgen/fingerforge.hpp"
#include "gripgen/graspsim.hpp"
#include "gripgen/meshio.hpp"
#include "gripgen/neural.hpp"
#include "gripgen/trainloop.hpp"
#include "gripgen/voxelgrid.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gripgen;
using fingerforge::Finger;
using fingerforge::Handedness;
using voxelgrid::TsdfVolume;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- run configuration ----

struct Paths {
  std::string objects, holdout, weights, dataset, run_dir;
};

struct RunConfig {
  int resolution = 16;
  std::uint64_t seed = 0;
  int workers = 1;
  int synth_count = 64;
  graspsim::SceneConfig scene;
  trainloop::AutoencoderConfig autoencoder;
  trainloop::GeneratorPretrainConfig generator_pretrain;
  trainloop::FitnessConfig fitness_pretrain;
  trainloop::CotrainConfig cotrain;
  trainloop::RandomEmbeddingConfig randemb;
  Paths paths;
};

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
      throw ConfigError("unknown config key '" + where + "." + k + "'");
}

template <class T>
void take(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "'");
  }
}

void take_adam(const json& j, neural::AdamConfig& a, const std::string& where) {
  take(j, "lr", a.lr, where);
  take(j, "weight_decay", a.weight_decay, where);
}

RunConfig parse_config(const json& j) {
  RunConfig c;
  reject_unknown(j,
                 {"resolution", "seed", "workers", "synth_count", "scene", "autoencoder", "generator_pretrain",
                  "fitness_pretrain", "cotrain", "randemb", "paths"},
                 "config");
  take(j, "resolution", c.resolution, "config");
  take(j, "seed", c.seed, "config");
  take(j, "workers", c.workers, "config");
  take(j, "synth_count", c.synth_count, "config");
  try {
    if (j.contains("scene")) graspsim::from_json(j.at("scene"), c.scene);
    c.scene.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  if (j.contains("autoencoder")) {
    const json& a = j.at("autoencoder");
    reject_unknown(a, {"epochs", "batch", "lr", "weight_decay"}, "autoencoder");
    take(a, "epochs", c.autoencoder.epochs, "autoencoder");
    take(a, "batch", c.autoencoder.batch, "autoencoder");
    take_adam(a, c.autoencoder.adam, "autoencoder");
  }
  if (j.contains("generator_pretrain")) {
    const json& a = j.at("generator_pretrain");
    reject_unknown(a, {"epochs", "batch", "lr", "weight_decay"}, "generator_pretrain");
    take(a, "epochs", c.generator_pretrain.epochs, "generator_pretrain");
    take(a, "batch", c.generator_pretrain.batch, "generator_pretrain");
    take_adam(a, c.generator_pretrain.adam, "generator_pretrain");
  }
  if (j.contains("fitness_pretrain")) {
    const json& a = j.at("fitness_pretrain");
    reject_unknown(a, {"batch", "min_epochs", "max_epochs", "target_loss", "lr", "weight_decay"}, "fitness_pretrain");
    take(a, "batch", c.fitness_pretrain.batch, "fitness_pretrain");
    take(a, "min_epochs", c.fitness_pretrain.min_epochs, "fitness_pretrain");
    take(a, "max_epochs", c.fitness_pretrain.max_epochs, "fitness_pretrain");
    take(a, "target_loss", c.fitness_pretrain.target_loss, "fitness_pretrain");
    take_adam(a, c.fitness_pretrain.adam, "fitness_pretrain");
  }
  if (j.contains("cotrain")) {
    const json& a = j.at("cotrain");
    // Seed, workers and scene live at the top level only.
    for (const char* k : {"seed", "workers", "scene"})
      if (a.is_object() && a.contains(k)) throw ConfigError(std::string("set '") + k + "' at the top level, not in cotrain");
    try {
      c.cotrain = trainloop::cotrain_config_from_json(a, c.cotrain);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("cotrain: ") + e.what());
    }
  }
  if (j.contains("randemb")) {
    const json& a = j.at("randemb");
    reject_unknown(a, {"steps", "lr"}, "randemb");
    take(a, "steps", c.randemb.steps, "randemb");
    take(a, "lr", c.randemb.lr, "randemb");
  }
  if (j.contains("paths")) {
    const json& a = j.at("paths");
    reject_unknown(a, {"objects", "holdout", "weights", "dataset", "run_dir"}, "paths");
    take(a, "objects", c.paths.objects, "paths");
    take(a, "holdout", c.paths.holdout, "paths");
    take(a, "weights", c.paths.weights, "paths");
    take(a, "dataset", c.paths.dataset, "paths");
    take(a, "run_dir", c.paths.run_dir, "paths");
  }
  return c;
}

// Runs after flag overrides; copies the shared fields into the phase configs.
void finalize(RunConfig& c) {
  if (c.resolution < 2 || c.resolution % 2 != 0) throw ConfigError("resolution must be even and >= 2");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.synth_count < 1) throw ConfigError("synth_count must be >= 1");
  if (c.autoencoder.epochs < 0 || c.autoencoder.batch < 1) throw ConfigError("autoencoder: bad epochs or batch");
  if (c.generator_pretrain.epochs < 0 || c.generator_pretrain.batch < 1)
    throw ConfigError("generator_pretrain: bad epochs or batch");
  if (c.fitness_pretrain.batch < 1 || c.fitness_pretrain.min_epochs < 0 ||
      c.fitness_pretrain.max_epochs < c.fitness_pretrain.min_epochs)
    throw ConfigError("fitness_pretrain: bad batch or epochs");
  if (c.randemb.steps < 0 || !(c.randemb.lr > 0)) throw ConfigError("randemb: bad steps or lr");
  c.autoencoder.seed = trainloop::phase_seed(c.seed, 1);
  c.generator_pretrain.seed = trainloop::phase_seed(c.seed, 2);
  c.fitness_pretrain.seed = trainloop::phase_seed(c.seed, 3);
  c.randemb.seed = c.seed;
  c.cotrain.seed = c.seed;
  c.cotrain.workers = c.workers;
  c.cotrain.scene = c.scene;
  try {
    c.cotrain.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("cotrain: ") + e.what());
  }
}

// ---- inputs ----

TsdfVolume load_volume(const std::string& path) {
  if (path.empty()) throw InputError("missing volume path");
  if (!fs::exists(path)) throw InputError("no such file: " + path);
  try {
    return voxelgrid::read_volume(path);
  } catch (const std::exception& e) {
    throw InputError(path + ": " + e.what());
  }
}

Finger load_finger(const std::string& path, Handedness h) { return Finger{load_volume(path), h}; }

struct NamedVolume {
  std::string id;
  TsdfVolume volume;
};

// Every *.tsdf in a directory, sorted by file name; ids are the stems.
std::vector<NamedVolume> load_dir(const std::string& dir) {
  if (dir.empty()) throw InputError("missing directory path");
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tsdf") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no .tsdf files in " + dir);
  std::vector<NamedVolume> out;
  for (const auto& f : files) out.push_back({f.stem().string(), load_volume(f.string())});
  for (const auto& v : out)
    if (!(v.volume.dims() == out.front().volume.dims()))
      throw InputError("volumes in " + dir + " have different dimensions");
  return out;
}

std::vector<TsdfVolume> volumes_of(const std::vector<NamedVolume>& v) {
  std::vector<TsdfVolume> out;
  for (const auto& x : v) out.push_back(x.volume);
  return out;
}

void require_cubic(const TsdfVolume& v, int n, const std::string& what) {
  const auto& d = v.dims();
  if (d.x != n || d.y != n || d.z != n)
    throw InputError(what + " is " + std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z) +
                     " but the models expect " + std::to_string(n) + "^3");
}

neural::Models load_weights(const std::string& dir) {
  if (dir.empty()) throw InputError("missing --weights");
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw InputError("no weights manifest in " + dir);
  try {
    return neural::load_models(dir);
  } catch (const std::exception& e) {
    throw InputError(dir + ": " + e.what());
  }
}

json feasibility_json(const fingerforge::FeasibilityReport& r) {
  return {{"feasible", r.feasible}, {"base_fraction", r.base_fraction}, {"component_count", r.component_count}};
}

// Writes a finger pair to `dir` and describes it.
json write_pair(const fs::path& dir, const Finger& l, const Finger& r) {
  fs::create_directories(dir);
  fingerforge::write_finger(l, dir / "left.tsdf");
  fingerforge::write_finger(r, dir / "right.tsdf");
  return {{"left", {{"file", (dir / "left.tsdf").string()}, {"feasibility", feasibility_json(fingerforge::check_feasibility(l).report)}}},
          {"right", {{"file", (dir / "right.tsdf").string()}, {"feasibility", feasibility_json(fingerforge::check_feasibility(r).report)}}}};
}

json phase_json(const std::vector<double>& losses) { return {{"epochs", losses.size()}, {"epoch_loss", losses}}; }

// ---- context shared by the commands ----

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<int> resolution;
  bool verbose = false;
};

class Runner {
 public:
  Common common;
  RunConfig cfg;

  void load_config() {
    json j = json::object();
    if (!common.config_path.empty()) {
      std::ifstream in(common.config_path);
      if (!in) throw InputError("cannot open config " + common.config_path);
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
      }
    }
    cfg = parse_config(j);
    if (common.seed) cfg.seed = *common.seed;
    if (common.workers) cfg.workers = *common.workers;
    if (common.resolution) cfg.resolution = *common.resolution;
    finalize(cfg);
  }

  trainloop::Logger logger() const {
    if (!common.verbose) return {};
    return [](const std::string& s) { std::cerr << s << "\n"; };
  }

  void emit(const json& j) const {
    const std::string text = j.dump(2) + "\n";
    if (common.out.empty()) {
      std::cout << text;
    } else {
      if (fs::path(common.out).has_parent_path()) fs::create_directories(fs::path(common.out).parent_path());
      datastore::write_atomic(common.out, text);
    }
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "Run configuration (JSON)");
  sub->add_option("--out", c.out, "Write the JSON result here instead of stdout");
  sub->add_option("--seed", c.seed, "Overrides the config seed");
  sub->add_option("--workers", c.workers, "Evaluation threads")->check(CLI::PositiveNumber);
  sub->add_option("--resolution", c.resolution, "Overrides the config resolution");
  sub->add_flag("-v,--verbose", c.verbose, "Progress lines on stderr");
}

// ---- commands ----

json cmd_synth(Runner& r, const std::string& out_dir, std::optional<int> count) {
  const int n = count.value_or(r.cfg.synth_count);
  if (n < 1) throw ConfigError("--count must be >= 1");
  if (out_dir.empty()) throw InputError("missing --out-dir");
  fs::create_directories(out_dir);
  json items = json::array();
  for (const auto& item : datastore::synth_corpus(n, r.cfg.resolution, r.cfg.seed)) {
    const TsdfVolume v = datastore::synth_object(item.kind, item.params, item.seed);
    const fs::path file = fs::path(out_dir) / (item.id + ".tsdf");
    voxelgrid::write_volume(v, file);
    items.push_back({{"id", item.id}, {"kind", datastore::to_string(item.kind)}, {"file", file.string()}});
  }
  return {{"resolution", r.cfg.resolution}, {"seed", r.cfg.seed}, {"objects", items}};
}

json cmd_imprint(Runner&, const std::string& object, const std::string& out_dir) {
  const TsdfVolume o = load_volume(object);
  if (o.dims().x % 2 != 0) throw InputError("imprint needs an even x dimension");
  if (out_dir.empty()) throw InputError("missing --out-dir");
  const auto [l, rt] = fingerforge::make_imprint_pair(o);
  return write_pair(out_dir, l, rt);
}

json cmd_evaluate(Runner& r, const std::string& object, const std::string& left, const std::string& right,
                  const std::string& jobs_file) {
  struct Loaded {
    std::string id;
    TsdfVolume object;
    Finger left, right;
  };
  std::vector<Loaded> loaded;
  if (!jobs_file.empty()) {
    if (!object.empty() || !left.empty() || !right.empty())
      throw ConfigError("use either --jobs or --object/--left/--right");
    std::ifstream in(jobs_file);
    if (!in) throw InputError("cannot open " + jobs_file);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw InputError(jobs_file + ": " + e.what());
    }
    if (!j.is_array()) throw InputError(jobs_file + ": expected an array of jobs");
    for (const auto& e : j) {
      if (!e.is_object()) throw InputError(jobs_file + ": job must be an object");
      reject_unknown(e, {"id", "object", "left", "right"}, "job");
      try {
        loaded.push_back({e.at("id").get<std::string>(), load_volume(e.at("object").get<std::string>()),
                          load_finger(e.at("left").get<std::string>(), Handedness::Left),
                          load_finger(e.at("right").get<std::string>(), Handedness::Right)});
      } catch (const json::exception& ex) {
        throw InputError(jobs_file + ": " + ex.what());
      }
    }
  } else {
    loaded.push_back({"job", load_volume(object), load_finger(left, Handedness::Left),
                      load_finger(right, Handedness::Right)});
  }
  for (const auto& l : loaded)
    if (!(l.left.volume.dims() == l.object.dims()) || !(l.right.volume.dims() == l.object.dims()))
      throw InputError("job " + l.id + ": object and fingers must share dimensions");
  std::vector<graspsim::EvaluationJob> jobs;
  for (const auto& l : loaded) jobs.push_back({l.id, "", &l.object, &l.left, &l.right, r.cfg.scene});
  const auto reports = graspsim::evaluate_batch(jobs, r.cfg.workers);
  if (jobs_file.empty()) return reports[0].to_json();
  // Keyed by id so the document does not depend on job order.
  json out = json::object();
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    if (out.contains(loaded[i].id)) throw InputError("duplicate job id " + loaded[i].id);
    out[loaded[i].id] = reports[i].to_json();
  }
  return out;
}

// Mass, friction and position perturbations applied one at a time.
std::vector<std::pair<std::string, graspsim::SceneConfig>> default_variants(const graspsim::SceneConfig& base) {
  std::vector<std::pair<std::string, graspsim::SceneConfig>> v;
  v.emplace_back("baseline", base);
  for (double mass : {0.1, 0.15}) {
    auto c = base;
    c.object_mass = mass;
    v.emplace_back("mass_" + std::to_string(static_cast<int>(mass * 1000 + 0.5)) + "g", c);
  }
  for (double mu : {0.1, 0.05}) {
    auto c = base;
    c.object_lateral_friction = mu;
    char buf[32];
    std::snprintf(buf, sizeof buf, "friction_%.2f", mu);
    v.emplace_back(buf, c);
  }
  const std::pair<const char*, std::array<double, 2>> offsets[] = {
      {"x_+0.5cm", {0.005, 0}}, {"x_-0.5cm", {-0.005, 0}}, {"y_+1cm", {0, 0.01}},
      {"y_-1cm", {0, -0.01}},   {"y_+2cm", {0, 0.02}},     {"y_-2cm", {0, -0.02}}};
  for (const auto& [name, off] : offsets) {
    auto c = base;
    c.position_offset = off;
    v.emplace_back(name, c);
  }
  return v;
}

json cmd_sweep(Runner& r, const std::string& object, const std::string& left, const std::string& right,
               const std::string& variants_file) {
  const TsdfVolume o = load_volume(object);
  const Finger l = load_finger(left, Handedness::Left), rt = load_finger(right, Handedness::Right);
  if (!(l.volume.dims() == o.dims()) || !(rt.volume.dims() == o.dims()))
    throw InputError("object and fingers must share dimensions");
  std::vector<std::pair<std::string, graspsim::SceneConfig>> variants;
  if (variants_file.empty()) {
    variants = default_variants(r.cfg.scene);
  } else {
    std::ifstream in(variants_file);
    if (!in) throw InputError("cannot open " + variants_file);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(variants_file + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(variants_file + ": expected {name: scene overrides}");
    for (const auto& [name, overrides] : j.items()) {
      graspsim::SceneConfig c = r.cfg.scene;
      try {
        graspsim::from_json(overrides, c);
        c.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError("variant " + name + ": " + e.what());
      }
      variants.emplace_back(name, c);
    }
  }
  std::vector<graspsim::EvaluationJob> jobs;
  for (const auto& [name, c] : variants) jobs.push_back({"object", name, &o, &l, &rt, c});
  const auto reports = graspsim::evaluate_batch(jobs, r.cfg.workers);
  json rows = json::array();
  for (std::size_t i = 0; i < variants.size(); ++i) {
    json scene;
    graspsim::to_json(scene, variants[i].second);
    rows.push_back({{"variant", variants[i].first}, {"scene", scene}, {"score", reports[i].to_json()["score"]}});
  }
  return {{"variants", rows}};
}

std::vector<TsdfVolume> training_fingers(const std::string& fingers_dir, const std::string& objects_dir) {
  if (!fingers_dir.empty()) return volumes_of(load_dir(fingers_dir));
  std::vector<TsdfVolume> out;
  for (const auto& o : load_dir(objects_dir)) {
    if (o.volume.dims().x % 2 != 0) throw InputError(o.id + ": imprint needs an even x dimension");
    auto [l, r] = fingerforge::make_imprint_pair(o.volume);
    out.push_back(std::move(l.volume));
    out.push_back(std::move(r.volume));
  }
  return out;
}

json cmd_pretrain_ae(Runner& r, const std::string& fingers_dir, const std::string& weights_out) {
  const std::string objects = r.cfg.paths.objects;
  if (fingers_dir.empty() && objects.empty()) throw InputError("need --fingers or an objects directory");
  if (weights_out.empty()) throw InputError("missing --weights-out");
  const auto fingers = training_fingers(fingers_dir, objects);
  for (const auto& f : fingers) require_cubic(f, r.cfg.resolution, "training finger");
  neural::Models m(r.cfg.resolution, r.cfg.seed);
  const auto rep = trainloop::pretrain_autoencoder(m, fingers, r.cfg.autoencoder, r.logger());
  neural::save_models(weights_out, m);
  json out = {{"autoencoder", phase_json(rep.epoch_loss)},
              {"windows_non_increasing", rep.windows_non_increasing},
              {"train_iou", trainloop::mean_reconstruction_iou(m, fingers)},
              {"weights", weights_out}};
  if (!r.cfg.paths.holdout.empty()) {
    const auto hold = training_fingers("", r.cfg.paths.holdout);
    for (const auto& f : hold) require_cubic(f, r.cfg.resolution, "holdout finger");
    out["holdout_iou"] = trainloop::mean_reconstruction_iou(m, hold);
  }
  return out;
}

json cmd_pretrain_gen(Runner& r, const std::string& weights_out) {
  neural::Models m = load_weights(r.cfg.paths.weights);
  const auto objs = load_dir(r.cfg.paths.objects);
  for (const auto& o : objs) require_cubic(o.volume, m.resolution(), o.id);
  std::vector<TsdfVolume> hold;
  if (!r.cfg.paths.holdout.empty()) hold = volumes_of(load_dir(r.cfg.paths.holdout));
  for (const auto& h : hold) require_cubic(h, m.resolution(), "holdout object");
  if (weights_out.empty()) throw InputError("missing --weights-out");
  const auto rep = trainloop::pretrain_generator(m, volumes_of(objs), hold, r.cfg.generator_pretrain, r.logger());
  neural::save_models(weights_out, m);
  return {{"generator_pretrain", phase_json(rep.epoch_loss)},
          {"initial_loss", rep.initial_loss},
          {"final_loss", rep.final_loss},
          {"holdout_feasibility", rep.holdout_feasibility},
          {"weights", weights_out}};
}

std::vector<trainloop::TargetObject> targets_of(const std::vector<NamedVolume>& v) {
  std::vector<trainloop::TargetObject> out;
  for (const auto& x : v) out.push_back({x.id, x.volume});
  return out;
}

// Opens the pretraining dataset, simulating imprint and shape-finger pairs
// for `objects` first when it is empty.
std::vector<trainloop::FitnessExample> pretrain_pool(Runner& r, const fs::path& dir,
                                                     const std::vector<trainloop::TargetObject>& objects) {
  try {
    auto d = datastore::Dataset::open_or_create(dir, "pretrain");
    if (d.size() == 0) {
      if (objects.empty()) throw InputError("dataset " + dir.string() + " is empty and no objects were given");
      trainloop::build_pretrain_dataset(objects, d, r.cfg.scene, r.cfg.seed, r.cfg.workers, r.logger());
    }
    return trainloop::load_examples(datastore::load_dataset(dir));
  } catch (const datastore::ValidationError& e) {
    throw InputError(e.what());
  } catch (const voxelgrid::FormatError& e) {
    throw InputError(e.what());
  }
}

json cmd_pretrain_fit(Runner& r, const std::string& weights_out) {
  neural::Models m = load_weights(r.cfg.paths.weights);
  if (r.cfg.paths.dataset.empty()) throw InputError("missing --dataset");
  std::vector<trainloop::TargetObject> objects;
  if (!r.cfg.paths.objects.empty()) objects = targets_of(load_dir(r.cfg.paths.objects));
  for (const auto& o : objects) require_cubic(o.volume, m.resolution(), o.id);
  const auto pool = pretrain_pool(r, r.cfg.paths.dataset, objects);
  for (const auto& e : pool) require_cubic(e.object, m.resolution(), "dataset object");
  if (weights_out.empty()) throw InputError("missing --weights-out");
  const auto rep = trainloop::pretrain_fitness(m, pool, r.cfg.fitness_pretrain, r.logger());
  neural::save_models(weights_out, m);
  json out = rep.to_json();
  out["examples"] = pool.size();
  out["weights"] = weights_out;
  return out;
}

// Full pipeline: autoencoder, generator imprint pretraining, fitness
// pretraining, then the co-training cycles. Each stage is skipped when its
// output already exists in the run directory.
json cmd_cotrain(Runner& r) {
  const RunConfig& c = r.cfg;
  if (c.paths.run_dir.empty()) throw InputError("missing --run-dir");
  const fs::path run = c.paths.run_dir;
  fs::create_directories(run);

  std::vector<NamedVolume> objs;
  if (c.paths.objects.empty()) {
    for (const auto& item : datastore::synth_corpus(c.synth_count, c.resolution, c.seed))
      objs.push_back({item.id, datastore::synth_object(item.kind, item.params, item.seed)});
  } else {
    objs = load_dir(c.paths.objects);
  }
  const auto log = r.logger();
  json out = json::object();
  neural::Models m;
  const fs::path pre_weights = run / "pretrained";
  if (!c.paths.weights.empty()) {
    m = load_weights(c.paths.weights);
  } else if (fs::exists(pre_weights / "manifest.json")) {
    m = load_weights(pre_weights.string());
  } else {
    for (const auto& o : objs) require_cubic(o.volume, c.resolution, o.id);
    m = neural::Models(c.resolution, c.seed);
    std::vector<TsdfVolume> fingers;
    for (const auto& o : objs) {
      auto [l, rt] = fingerforge::make_imprint_pair(o.volume);
      fingers.push_back(std::move(l.volume));
      fingers.push_back(std::move(rt.volume));
    }
    const auto ae = trainloop::pretrain_autoencoder(m, fingers, c.autoencoder, log);
    const auto gen = trainloop::pretrain_generator(m, volumes_of(objs), {}, c.generator_pretrain, log);
    out["pretraining"] = {{"autoencoder", phase_json(ae.epoch_loss)},
                          {"autoencoder_iou", trainloop::mean_reconstruction_iou(m, fingers)},
                          {"generator", phase_json(gen.epoch_loss)},
                          {"generator_feasibility", trainloop::generated_feasibility(m, volumes_of(objs))}};
  }
  for (const auto& o : objs) require_cubic(o.volume, m.resolution(), o.id);
  const auto targets = targets_of(objs);
  const fs::path pool_dir = c.paths.dataset.empty() ? run / "pretrain_dataset" : fs::path(c.paths.dataset);
  const auto pool = pretrain_pool(r, pool_dir, targets);
  if (!fs::exists(pre_weights / "manifest.json")) {
    const auto fit = trainloop::pretrain_fitness(m, pool, c.fitness_pretrain, log);
    if (out.contains("pretraining")) out["pretraining"]["fitness"] = fit.to_json();
    else out["pretraining"] = {{"fitness", fit.to_json()}};
    neural::save_models(pre_weights, m);
    m = neural::load_models(pre_weights);
  }
  const auto reports = trainloop::cotrain(m, targets, pool, c.cotrain, run, log);
  json cycles = json::array();
  for (const auto& rep : reports) cycles.push_back(rep.to_json());
  out["cycles"] = cycles;
  out["run_dir"] = run.string();
  return out;
}

json cmd_generate(Runner& r, const std::string& object, const std::string& out_dir) {
  neural::Models m = load_weights(r.cfg.paths.weights);
  const TsdfVolume o = load_volume(object);
  require_cubic(o, m.resolution(), "object");
  if (out_dir.empty()) throw InputError("missing --out-dir");
  const auto [l, rt] = neural::generate(m, o);
  json out = write_pair(out_dir, l, rt);
  const auto pred = neural::fitness_predict(m, o, l, rt);
  out["predicted_fitness"] = std::vector<double>(pred.begin(), pred.end());
  return out;
}

json cmd_randemb(Runner& r, const std::string& object, const std::string& out_dir, const std::string& mask) {
  neural::Models m = load_weights(r.cfg.paths.weights);
  const TsdfVolume o = load_volume(object);
  require_cubic(o, m.resolution(), "object");
  if (out_dir.empty()) throw InputError("missing --out-dir");
  neural::ObjectiveMask om;
  try {
    om = neural::ObjectiveMask::parse(mask);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto res = trainloop::optimize_random_embedding(m, o, om, r.cfg.randemb);
  json out = write_pair(out_dir, res.left, res.right);
  out["initial_fitness"] = res.initial_fitness;
  out["best_fitness"] = res.best_fitness;
  out["best_step"] = res.best_step;
  return out;
}

json cmd_export_mesh(Runner&, const std::string& volume, const std::string& mesh_path, double iso, bool no_pad) {
  const TsdfVolume raw = load_volume(volume);
  const TsdfVolume v = no_pad ? raw : meshio::pad_exterior(raw);
  if (mesh_path.empty()) throw InputError("missing --mesh");
  if (!(iso > -1.0 && iso < 1.0)) throw ConfigError("--iso must lie in (-1, 1)");
  const auto mesh = meshio::marching_cubes(v, iso);
  const std::string ext = fs::path(mesh_path).extension().string();
  if (fs::path(mesh_path).has_parent_path()) fs::create_directories(fs::path(mesh_path).parent_path());
  if (ext == ".obj") meshio::write_obj(mesh, mesh_path);
  else if (ext == ".stl") meshio::write_stl(mesh, mesh_path);
  else throw ConfigError("--mesh must end in .obj or .stl");
  return {{"mesh", mesh_path},
          {"vertices", mesh.vertices.size()},
          {"triangles", mesh.triangles.size()},
          {"watertight", meshio::non_manifold_edges(mesh) == 0},
          {"euler_characteristic", meshio::euler_characteristic(mesh)}};
}

// Success, per-force stability and per-angle robustness percentages, per
// provenance tag and overall.
json cmd_report(Runner&, const std::string& dir, bool text) {
  if (dir.empty()) throw InputError("missing --dataset");
  datastore::Dataset d = [&] {
    try {
      return datastore::load_dataset(dir);
    } catch (const datastore::ValidationError& e) {
      throw InputError(e.what());
    } catch (const voxelgrid::FormatError& e) {
      throw InputError(e.what());
    }
  }();
  std::vector<std::string> groups;
  for (const auto& rec : d.records()) {
    const std::string g = datastore::to_string(rec.provenance);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  std::sort(groups.begin(), groups.end());
  groups.push_back("all");
  json rows = json::array();
  std::string table;
  char buf[256];
  for (const auto& g : groups) {
    std::vector<std::vector<float>> bits;
    for (const auto& rec : d.records())
      if (g == "all" || datastore::to_string(rec.provenance) == g) bits.push_back(rec.score.as_vector());
    const std::size_t angles = bits.empty() ? 0 : bits[0].size() - 5;
    auto pct = [&](std::size_t k) {
      double s = 0;
      for (const auto& b : bits) s += k < b.size() ? b[k] : 0.0;
      return bits.empty() ? 0.0 : 100.0 * s / static_cast<double>(bits.size());
    };
    std::vector<double> stab, rob;
    for (std::size_t k = 1; k <= 4; ++k) stab.push_back(pct(k));
    for (std::size_t k = 0; k < angles; ++k) rob.push_back(pct(5 + k));
    auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    rows.push_back({{"group", g},
                    {"records", bits.size()},
                    {"grasp_success", pct(0)},
                    {"stability", stab},
                    {"stability_avg", mean(stab)},
                    {"robustness", rob},
                    {"robustness_avg", mean(rob)}});
    std::snprintf(buf, sizeof buf, "%-16s %7zu | %6.1f | %6.1f %6.1f %6.1f %6.1f | %6.1f | ", g.c_str(), bits.size(),
                  pct(0), stab[0], stab[1], stab[2], stab[3], mean(stab));
    table += buf;
    for (double x : rob) {
      std::snprintf(buf, sizeof buf, "%6.1f ", x);
      table += buf;
    }
    std::snprintf(buf, sizeof buf, "| %6.1f\n", mean(rob));
    table += buf;
  }
  json out = {{"dataset", d.manifest().name},
              {"columns", {{"grasp", {"success"}},
                           {"stability", {"down", "side_0", "side_120", "side_240", "avg"}},
                           {"robustness", {"angles", "avg"}}}},
              {"rows", rows}};
  if (text) {
    std::string head = "group            records |  grasp | stability (4 forces)        |    avg | robustness (per angle) | avg\n";
    out["table"] = head + table;
  }
  return out;
}

void fail(int code, const std::string& kind, const std::string& message) {
  // dump() escapes newlines, keeping the error on one line.
  std::cerr << json{{"error", {{"code", code}, {"kind", kind}, {"message", message}}}}.dump() << std::endl;
  std::exit(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gripgen: generate, evaluate and train gripper finger designs"};
  app.require_subcommand(1);
  Runner r;
  Common& c = r.common;

  std::string object, left, right, jobs, variants, out_dir, fingers, weights_out, volume, mesh, mask = "all";
  std::optional<int> count;
  double iso = 0.0;
  bool text = false, no_pad = false;
  auto paths = [&](CLI::App* s, std::initializer_list<const char*> which) {
    for (const char* w : which) {
      const std::string key = w;
      if (key == "objects") s->add_option("--objects", r.cfg.paths.objects, "Directory of object .tsdf files");
      if (key == "holdout") s->add_option("--holdout", r.cfg.paths.holdout, "Directory of holdout object .tsdf files");
      if (key == "weights") s->add_option("--weights", r.cfg.paths.weights, "Model weights directory");
      if (key == "dataset") s->add_option("--dataset", r.cfg.paths.dataset, "Dataset directory");
      if (key == "run_dir") s->add_option("--run-dir", r.cfg.paths.run_dir, "Run directory");
    }
  };

  std::vector<std::pair<CLI::App*, std::function<json()>>> commands;
  auto sub = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, c);
    return s;
  };

  auto* s_synth = sub("synth", "Write a synthetic object corpus");
  s_synth->add_option("--out-dir", out_dir, "Output directory")->required();
  s_synth->add_option("--count", count, "Number of objects (default: config synth_count)");
  commands.emplace_back(s_synth, [&] { return cmd_synth(r, out_dir, count); });

  auto* s_imp = sub("imprint", "Imprint finger pair for an object");
  s_imp->add_option("--object", object)->required();
  s_imp->add_option("--out-dir", out_dir)->required();
  commands.emplace_back(s_imp, [&] { return cmd_imprint(r, object, out_dir); });

  auto* s_eval = sub("evaluate", "Simulate grasps and print their 11-bit scores");
  s_eval->add_option("--object", object);
  s_eval->add_option("--left", left);
  s_eval->add_option("--right", right);
  s_eval->add_option("--jobs", jobs, "JSON array of {id, object, left, right}");
  commands.emplace_back(s_eval, [&] { return cmd_evaluate(r, object, left, right, jobs); });

  auto* s_sweep = sub("sweep", "Score one grasp under perturbed scene parameters");
  s_sweep->add_option("--object", object)->required();
  s_sweep->add_option("--left", left)->required();
  s_sweep->add_option("--right", right)->required();
  s_sweep->add_option("--variants", variants, "JSON {name: scene overrides}; default mass/friction/offset set");
  commands.emplace_back(s_sweep, [&] { return cmd_sweep(r, object, left, right, variants); });

  auto* s_ae = sub("pretrain-ae", "Train the finger autoencoder");
  s_ae->add_option("--fingers", fingers, "Directory of finger .tsdf files");
  paths(s_ae, {"objects", "holdout"});
  s_ae->add_option("--weights-out", weights_out)->required();
  commands.emplace_back(s_ae, [&] { return cmd_pretrain_ae(r, fingers, weights_out); });

  auto* s_gen = sub("pretrain-gen", "Fit the embedding network to imprint codes");
  paths(s_gen, {"weights", "objects", "holdout"});
  s_gen->add_option("--weights-out", weights_out)->required();
  commands.emplace_back(s_gen, [&] { return cmd_pretrain_gen(r, weights_out); });

  auto* s_fit = sub("pretrain-fit", "Train the fitness network on a grasp dataset");
  paths(s_fit, {"weights", "dataset", "objects"});
  s_fit->add_option("--weights-out", weights_out)->required();
  commands.emplace_back(s_fit, [&] { return cmd_pretrain_fit(r, weights_out); });

  auto* s_co = sub("cotrain", "Pretraining followed by co-training cycles (resumable)");
  paths(s_co, {"weights", "objects", "dataset", "run_dir"});
  commands.emplace_back(s_co, [&] { return cmd_cotrain(r); });

  auto* s_g = sub("generate", "Generate a finger pair for an object");
  paths(s_g, {"weights"});
  s_g->add_option("--object", object)->required();
  s_g->add_option("--out-dir", out_dir)->required();
  commands.emplace_back(s_g, [&] { return cmd_generate(r, object, out_dir); });

  auto* s_re = sub("randemb", "Optimize two random finger codes against the fitness network");
  paths(s_re, {"weights"});
  s_re->add_option("--object", object)->required();
  s_re->add_option("--out-dir", out_dir)->required();
  s_re->add_option("--mask", mask, "Objective groups: all, or gs, s, r joined by '+'");
  commands.emplace_back(s_re, [&] { return cmd_randemb(r, object, out_dir, mask); });

  auto* s_mesh = sub("export-mesh", "Extract the zero level set as OBJ or STL");
  s_mesh->add_option("--volume", volume)->required();
  s_mesh->add_option("--mesh", mesh, "Output .obj or .stl")->required();
  s_mesh->add_option("--iso", iso);
  s_mesh->add_flag("--no-pad", no_pad, "Mesh the grid as is; shapes touching the boundary stay open");
  commands.emplace_back(s_mesh, [&] { return cmd_export_mesh(r, volume, mesh, iso, no_pad); });

  auto* s_rep = sub("report", "Summarize a dataset's scores");
  s_rep->add_option("--dataset", r.cfg.paths.dataset)->required();
  s_rep->add_flag("--text", text, "Include a fixed-width table");
  commands.emplace_back(s_rep, [&] { return cmd_report(r, r.cfg.paths.dataset, text); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail(2, "config", e.what());
  }

  // Flags parsed into r.cfg.paths must survive the config load.
  const Paths flag_paths = r.cfg.paths;
  try {
    r.load_config();
    for (auto [field, flag] : {std::pair{&r.cfg.paths.objects, &flag_paths.objects},
                               {&r.cfg.paths.holdout, &flag_paths.holdout},
                               {&r.cfg.paths.weights, &flag_paths.weights},
                               {&r.cfg.paths.dataset, &flag_paths.dataset},
                               {&r.cfg.paths.run_dir, &flag_paths.run_dir}})
      if (!flag->empty()) *field = *flag;
    for (auto& [s, run] : commands)
      if (s->parsed()) {
        r.emit(run());
        return 0;
      }
  } catch (const ConfigError& e) {
    fail(2, "config", e.what());
  } catch (const InputError& e) {
    fail(3, "input", e.what());
  } catch (const voxelgrid::FormatError& e) {
    fail(3, "input", e.what());
  } catch (const datastore::ValidationError& e) {
    fail(3, "input", e.what());
  } catch (const std::exception& e) {
    fail(4, "runtime", e.what());
  }
  fail(2, "config", "no command given");
}
