#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "gripgen/trainloop.hpp"

using namespace gripgen;
using namespace gripgen::trainloop;
namespace fs = std::filesystem;
using neural::Network;

namespace {

constexpr int kRes = 16;

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gripgen_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<TsdfVolume> objects(int n, std::uint64_t seed) {
  std::vector<TsdfVolume> out;
  for (const auto& item : datastore::synth_corpus(n, kRes, seed))
    out.push_back(datastore::synth_object(item.kind, item.params, item.seed));
  return out;
}

std::vector<TsdfVolume> imprint_fingers(const std::vector<TsdfVolume>& objs) {
  std::vector<TsdfVolume> out;
  for (const auto& o : objs) {
    auto [l, r] = fingerforge::make_imprint_pair(o);
    out.push_back(std::move(l.volume));
    out.push_back(std::move(r.volume));
  }
  return out;
}

std::vector<std::vector<double>> snapshot(const Network& n) {
  std::vector<std::vector<double>> out;
  for (const auto* p : n.parameters()) out.push_back(p->value);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

neural::AdamConfig fast(double lr = 1e-3) {
  neural::AdamConfig a;
  a.lr = lr;
  return a;
}

// Examples whose every score bit equals whether the object is a large sphere.
std::vector<FitnessExample> separable_pool(int n) {
  std::vector<FitnessExample> pool;
  const auto fingers = imprint_fingers({fixtures::sphere_volume(kRes, 4.0, {8, 8, 4})});
  for (int i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    const double r = pos ? 5.0 + 0.1 * (i % 5) : 2.0 + 0.1 * (i % 5);
    FitnessExample e{fixtures::sphere_volume(kRes, r, {8, 8, r}), fingers[0], fingers[1], {}};
    e.target.fill(pos ? 1.0f : 0.0f);
    pool.push_back(std::move(e));
  }
  return pool;
}

}  // namespace

TEST_CASE("phase seeds differ per tag and are stable") {
  CHECK(phase_seed(1, 2) == phase_seed(1, 2));
  CHECK(phase_seed(1, 2) != phase_seed(1, 3));
  CHECK(phase_seed(1, 2) != phase_seed(2, 2));
}

TEST_CASE("autoencoder pretraining") {
  Models m(kRes, 3);
  const auto fingers = imprint_fingers(objects(2, 5));

  SUBCASE("zero epochs leaves weights unchanged but freezes") {
    const auto enc = snapshot(m.encoder), dec = snapshot(m.decoder);
    AutoencoderConfig cfg;
    cfg.epochs = 0;
    const auto rep = pretrain_autoencoder(m, fingers, cfg);
    CHECK(rep.epoch_loss.empty());
    CHECK(snapshot(m.encoder) == enc);
    CHECK(snapshot(m.decoder) == dec);
    CHECK(m.encoder.frozen());
    CHECK_FALSE(m.decoder.training());
  }

  SUBCASE("empty corpus throws") {
    CHECK_THROWS_AS(pretrain_autoencoder(m, std::span<const TsdfVolume>{}, {}), std::invalid_argument);
  }

  SUBCASE("memorizes a handful of fingers") {
    AutoencoderConfig cfg;
    cfg.epochs = 150;
    cfg.batch = 4;
    cfg.adam = fast();
    const auto rep = pretrain_autoencoder(m, fingers, cfg);
    REQUIRE(rep.epoch_loss.size() == 150);
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
    const double iou = mean_reconstruction_iou(m, fingers);
    MESSAGE("memorization IoU " << iou);
    CHECK(iou >= 0.95);
    // Weights are frozen afterwards; inference does not move them.
    const auto enc = snapshot(m.encoder);
    (void)reconstruction_iou(m, fingers[0]);
    CHECK(snapshot(m.encoder) == enc);
  }
}

TEST_CASE("balanced sampler") {
  std::vector<bool> labels(100, false);
  for (int i = 0; i < 10; ++i) labels[i * 10] = true;
  BalancedSampler s(labels, 8, 42);
  REQUIRE(s.balanced());
  CHECK(s.batches_per_epoch() == 23);  // ceil(90 / 4)
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto batches = s.epoch();
    CHECK(batches.size() == 23);
    std::set<std::size_t> negatives;
    for (const auto& b : batches) {
      REQUIRE(b.size() == 8);
      int pos = 0;
      for (std::size_t i : b) {
        REQUIRE(i < 100);
        pos += labels[i];
        if (!labels[i]) negatives.insert(i);
      }
      CHECK(pos == 4);
    }
    // The larger class is covered exactly once per epoch.
    CHECK(negatives.size() == 90);
  }

  BalancedSampler a(labels, 8, 7), b(labels, 8, 7);
  CHECK(a.epoch() == b.epoch());

  BalancedSampler one(std::vector<bool>(9, true), 4, 1);
  CHECK_FALSE(one.balanced());
  const auto batches = one.epoch();
  CHECK(batches.size() == 2);  // 4 + 5: the lone trailing item joins the last batch
  std::set<std::size_t> all;
  for (const auto& bt : batches) all.insert(bt.begin(), bt.end());
  CHECK(all.size() == 9);

  CHECK_THROWS_AS(BalancedSampler(labels, 0, 1), std::invalid_argument);
}

TEST_CASE("fitness training") {
  SUBCASE("separable task is learned") {
    Models m(kRes, 11);
    FitnessConfig cfg;
    cfg.batch = 8;
    cfg.min_epochs = 40;
    cfg.max_epochs = 40;
    cfg.target_loss = 0.0;
    cfg.adam = fast(1e-2);
    const auto pool = separable_pool(16);
    const auto emb = snapshot(m.embedding), dec = snapshot(m.decoder);
    const auto rep = pretrain_fitness(m, pool, cfg);
    CHECK(rep.epochs() == 40);
    MESSAGE("separable loss " << rep.final_loss());
    CHECK(rep.final_loss() < 0.1);
    CHECK(rep.warnings.empty());
    CHECK(snapshot(m.embedding) == emb);
    CHECK(snapshot(m.decoder) == dec);
  }

  SUBCASE("overfits a two-example pool") {
    Models m(kRes, 12);
    FitnessConfig cfg;
    cfg.batch = 2;
    cfg.min_epochs = 80;
    cfg.max_epochs = 80;
    cfg.target_loss = 0.0;
    cfg.adam = fast(1e-2);
    const auto rep = pretrain_fitness(m, separable_pool(2), cfg);
    MESSAGE("two-point loss " << rep.final_loss());
    CHECK(rep.final_loss() < 0.02);
  }

  SUBCASE("early stop and single-class warning") {
    Models m(kRes, 13);
    auto pool = separable_pool(4);
    for (auto& e : pool) e.target.fill(1.0f);
    FitnessConfig cfg;
    cfg.batch = 4;
    cfg.min_epochs = 2;
    cfg.max_epochs = 10;
    cfg.target_loss = 10.0;  // any loss qualifies
    const auto rep = pretrain_fitness(m, pool, cfg);
    CHECK(rep.epochs() == 2);
    CHECK(rep.reached_target);
    CHECK(rep.warnings.size() == 1);
    CHECK_THROWS_AS(pretrain_fitness(m, {}, cfg), std::invalid_argument);
  }
}

TEST_CASE("generator phases keep the other networks fixed") {
  Models m(kRes, 21);
  const auto objs = objects(8, 9);
  {
    AutoencoderConfig ae;
    ae.epochs = 5;
    ae.adam = fast();
    pretrain_autoencoder(m, imprint_fingers(objs), ae);
  }
  const auto enc = snapshot(m.encoder), dec = snapshot(m.decoder), fit = snapshot(m.fitness);

  GeneratorPretrainConfig pc;
  pc.epochs = 30;
  pc.batch = 4;
  pc.adam = fast();
  const auto pre = pretrain_generator(m, objs, std::span<const TsdfVolume>(objs).first(2), pc);
  CHECK(pre.epoch_loss.size() == 30);
  MESSAGE("imprint latent loss " << pre.initial_loss << " -> " << pre.final_loss);
  CHECK(pre.final_loss < pre.initial_loss);
  CHECK(pre.holdout_feasibility >= 0.0);
  CHECK(pre.holdout_feasibility <= 1.0);

  GeneratorConfig gc;
  gc.min_epochs = 3;
  gc.max_epochs = 3;
  gc.steps_per_epoch = 4;
  gc.batch = 4;
  gc.adam = fast();
  const auto emb_before = snapshot(m.embedding);
  const auto rep = train_generator(m, objs, gc, ObjectiveMask{});
  CHECK(rep.epochs() == 3);
  for (double l : rep.epoch_loss) {
    CHECK(std::isfinite(l));
    CHECK(l >= -1.0);
    CHECK(l <= 0.0);
  }
  CHECK(snapshot(m.embedding) != emb_before);
  CHECK(snapshot(m.encoder) == enc);
  CHECK(snapshot(m.decoder) == dec);
  CHECK(snapshot(m.fitness) == fit);
}

TEST_CASE("random embedding baseline") {
  Models m(kRes, 31);
  const TsdfVolume obj = objects(1, 4)[0];
  RandomEmbeddingConfig cfg;
  cfg.steps = 0;
  const auto r0 = optimize_random_embedding(m, obj, ObjectiveMask{}, cfg);
  CHECK(r0.best_step == 0);
  CHECK(r0.best_fitness == r0.initial_fitness);

  cfg.steps = 10;
  cfg.lr = 0.5;  // large steps push codes into the clamp
  const auto r = optimize_random_embedding(m, obj, ObjectiveMask{}, cfg);
  CHECK(r.initial_fitness == doctest::Approx(r0.initial_fitness));
  CHECK(r.best_fitness >= r.initial_fitness);
  CHECK(r.best_fitness <= 1.0);
  CHECK(r.left.handedness == fingerforge::Handedness::Left);
  CHECK(r.right.volume.dims() == obj.dims());
  CHECK(r.left_report == fingerforge::check_feasibility(r.left).report);
  CHECK_THROWS_AS(optimize_random_embedding(m, obj, ObjectiveMask{}, {-1}), std::invalid_argument);
}

TEST_CASE("cotrain config JSON") {
  CotrainConfig c = CotrainConfig::smoke();
  c.mask = ObjectiveMask::parse("gs");
  const auto back = cotrain_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(cotrain_config_from_json({{"cycles", 1}, {"bogus", 2}}), std::invalid_argument);
  CHECK_THROWS_AS(cotrain_config_from_json({{"fitness", {{"lr_typo", 1}}}}), std::invalid_argument);
  CHECK_THROWS_AS(cotrain_config_from_json({{"objects_per_cycle", 0}}), std::invalid_argument);
  CHECK_THROWS_AS(cotrain_config_from_json({{"cycles", "two"}}), std::invalid_argument);
  CHECK(cotrain_config_from_json({{"cycles", 3}}).cycles == 3);
}

TEST_CASE("pretrain dataset and co-training bookkeeping") {
  const auto objs = objects(4, 17);
  std::vector<TargetObject> targets;
  for (std::size_t i = 0; i < objs.size(); ++i) targets.push_back({"obj" + std::to_string(i), objs[i]});

  const fs::path root = fresh_dir("cotrain");
  auto pre = datastore::Dataset::open_or_create(root / "pretrain", "pretrain");
  build_pretrain_dataset(targets, pre, {}, 5);
  CHECK(pre.size() >= 4);
  CHECK(pre.size() <= 8);
  for (const auto& [tag, n] : pre.manifest().provenance_counts())
    if (n > 0) CHECK((tag == "imprint" || tag == "shapenet_style"));
  const auto pool = load_examples(datastore::load_dataset(root / "pretrain"));
  CHECK(pool.size() == pre.size());

  CotrainConfig cfg;
  cfg.cycles = 2;
  cfg.objects_per_cycle = 3;
  cfg.fitness.batch = 4;
  cfg.fitness.min_epochs = 1;
  cfg.fitness.max_epochs = 1;
  cfg.generator.min_epochs = 1;
  cfg.generator.max_epochs = 1;
  cfg.generator.steps_per_epoch = 2;
  cfg.generator.batch = 4;
  cfg.seed = 8;

  auto start = [] {
    Models m(kRes, 41);
    for (Network* n : {&m.encoder, &m.decoder}) {
      n->set_frozen(true);
      n->set_training(false);
    }
    return m;
  };

  Models a = start();
  std::vector<std::string> lines;
  const auto reps = cotrain(a, targets, pool, cfg, root / "a", [&](const std::string& s) { lines.push_back(s); });
  REQUIRE(reps.size() == 2);
  CHECK(!lines.empty());
  for (int c = 0; c < 2; ++c) {
    CHECK(reps[c].cycle == c + 1);
    CHECK(reps[c].dataset_size == static_cast<std::size_t>(3 * (c + 1)));
    CHECK(reps[c].losses_finite);
    CHECK(reps[c].feasibility_rate >= 0.0);
    CHECK(reps[c].success_rate <= reps[c].feasibility_rate);
  }
  CHECK(fs::exists(root / "a" / "config.json"));
  CHECK(fs::exists(root / "a" / "cycle_02" / "report.json"));
  const auto ds = datastore::load_dataset(root / "a" / "dataset");
  CHECK(ds.size() == 6);
  for (const auto& r : ds.records()) CHECK(r.provenance == datastore::Provenance::Generated);

  // Interrupted during cycle 2: report missing, extra records appended.
  Models b = start();
  cotrain(b, targets, pool, cfg, root / "b");
  fs::remove(root / "b" / "cycle_02" / "report.json");
  fs::remove_all(root / "b" / "cycle_02" / "weights");
  {
    auto d = datastore::Dataset::open(root / "b" / "dataset");
    const auto v = d.load(d.records()[0]);
    d.append("junk", v.object, v.left, v.right, d.records()[0].score, datastore::Provenance::Generated, "x");
  }
  Models b2 = start();
  const auto resumed = cotrain(b2, targets, pool, cfg, root / "b");
  REQUIRE(resumed.size() == 2);
  CHECK(resumed[1].to_json() == reps[1].to_json());
  CHECK(slurp(root / "b" / "cycle_02" / "weights" / "weights.bin") ==
        slurp(root / "a" / "cycle_02" / "weights" / "weights.bin"));
  CHECK(slurp(root / "b" / "dataset" / "manifest.json") == slurp(root / "a" / "dataset" / "manifest.json"));

  // A finished run does no further work; a changed config is refused.
  Models c = start();
  CHECK(cotrain(c, targets, pool, cfg, root / "a").size() == 2);
  cfg.seed = 9;
  CHECK_THROWS_AS(cotrain(c, targets, pool, cfg, root / "a"), std::invalid_argument);
}
