#include "gripgen/trainloop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gripgen::trainloop {

namespace fs = std::filesystem;
using nlohmann::json;
using neural::Adam;
using neural::Parameter;
using neural::Network;
using neural::Shape;
using neural::Tensor;

namespace {

enum Tag : std::uint64_t { kAutoencoder = 1, kGeneratorPretrain, kFitness, kGenerator, kRandEmb, kPretrainData, kCycle = 1000 };

std::uint64_t splitmix(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Small seeded generator with platform-independent draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(seed) {}
  std::uint64_t next() { return splitmix(s_); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * static_cast<double>(next() >> 11) * 0x1.0p-53; }
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
    return p;
  }

 private:
  std::uint64_t s_;
};

// Consecutive slices of `order`; a trailing single item joins the previous
// slice so batch norm never sees a lone training sample.
std::vector<std::vector<std::size_t>> slices(const std::vector<std::size_t>& order, int batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

Tensor stack(std::span<const TsdfVolume> vols, const std::vector<std::size_t>& idx) {
  std::vector<const TsdfVolume*> p;
  for (std::size_t i : idx) p.push_back(&vols[i]);
  return neural::volumes_to_tensor(p);
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  Shape s = t.shape;
  s[0] = static_cast<int>(idx.size());
  Tensor out(s);
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy(t.sample(static_cast<int>(idx[b])), t.sample(static_cast<int>(idx[b])) + t.stride(),
              out.sample(static_cast<int>(b)));
  return out;
}

std::vector<Parameter*> concat(std::vector<Parameter*> a, const std::vector<Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void say(const Logger& log, const std::string& s) {
  if (log) log(s);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Frames and targets of the listed examples from one or two pools.
struct FitnessBatch {
  Tensor x, y;
};

FitnessBatch make_batch(const std::vector<FitnessExample>& a, const std::vector<std::size_t>& ia,
                        const std::vector<FitnessExample>* b = nullptr, const std::vector<std::size_t>* ib = nullptr) {
  std::vector<const TsdfVolume*> o, l, r;
  std::vector<double> y;
  auto add = [&](const std::vector<FitnessExample>& pool, const std::vector<std::size_t>& idx) {
    for (std::size_t i : idx) {
      o.push_back(&pool[i].object);
      l.push_back(&pool[i].left);
      r.push_back(&pool[i].right);
      y.insert(y.end(), pool[i].target.begin(), pool[i].target.end());
    }
  };
  add(a, ia);
  if (b) add(*b, *ib);
  const int n = static_cast<int>(o.size());
  return {neural::fitness_input(o, l, r), Tensor({n, neural::kObjectives}, std::move(y))};
}

std::vector<bool> labels_of(const std::vector<FitnessExample>& pool) {
  std::vector<bool> out;
  for (const auto& e : pool) out.push_back(e.success());
  return out;
}

double fitness_step(Models& m, Adam& opt, const FitnessBatch& batch) {
  opt.zero_grad();
  Tensor g;
  const double loss = neural::fitness_loss(m.fitness.forward(batch.x), batch.y, &g);
  m.fitness.backward(g);
  opt.step();
  return loss;
}

bool finite_all(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void write_text(const fs::path& p, const std::string& s) { datastore::write_atomic(p, s); }

std::string cycle_name(int c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cycle_%02d", c);
  return buf;
}

}  // namespace

std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (tag * 0xd1342543de82ef95ull);
  splitmix(s);
  return splitmix(s);
}

// ---- autoencoder ----

AutoencoderReport pretrain_autoencoder(Models& m, std::span<const TsdfVolume> fingers, const AutoencoderConfig& cfg,
                                       const Logger& log) {
  if (fingers.empty()) throw std::invalid_argument("autoencoder corpus is empty");
  if (cfg.epochs < 0 || cfg.batch < 1) throw std::invalid_argument("autoencoder epochs must be >= 0 and batch >= 1");
  AutoencoderReport rep;
  for (Network* n : {&m.encoder, &m.decoder}) {
    n->set_frozen(false);
    n->set_training(true);
  }
  Adam opt(concat(m.encoder.trainable(), m.decoder.trainable()), cfg.adam);
  Rng rng(phase_seed(cfg.seed, kAutoencoder));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : slices(rng.permutation(fingers.size()), cfg.batch)) {
      const Tensor x = stack(fingers, idx);
      opt.zero_grad();
      Tensor g;
      const double loss = neural::mse_loss(m.decoder.forward(m.encoder.forward(x)), x, &g);
      m.encoder.backward(m.decoder.backward(g));
      opt.step();
      total += loss * static_cast<double>(idx.size());
    }
    rep.epoch_loss.push_back(total / static_cast<double>(fingers.size()));
    say(log, "autoencoder epoch " + std::to_string(epoch + 1) + " loss " + fmt("%.6f", rep.epoch_loss.back()));
  }
  for (std::size_t i = 4; i < rep.epoch_loss.size(); ++i)
    if (rep.epoch_loss[i] > rep.epoch_loss[i - 4]) rep.windows_non_increasing = false;
  for (Network* n : {&m.encoder, &m.decoder}) {
    n->set_frozen(true);
    n->set_training(false);
  }
  return rep;
}

double reconstruction_iou(Models& m, const TsdfVolume& v) {
  const TsdfVolume r = neural::decode(m, neural::encode(m, v));
  return voxelgrid::iou(voxelgrid::occupancy_from_tsdf(v), voxelgrid::occupancy_from_tsdf(r));
}

double mean_reconstruction_iou(Models& m, std::span<const TsdfVolume> volumes) {
  if (volumes.empty()) return 0.0;
  double s = 0.0;
  for (const TsdfVolume& v : volumes) s += reconstruction_iou(m, v);
  return s / static_cast<double>(volumes.size());
}

// ---- generator imprint pretraining ----

Tensor imprint_targets(Models& m, std::span<const TsdfVolume> objects) {
  const int L = m.latent_dim();
  Tensor out({static_cast<int>(objects.size()), 2 * L});
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto [l, r] = fingerforge::make_imprint_pair(objects[i]);
    const auto zl = neural::encode(m, l.volume), zr = neural::encode(m, r.volume);
    double* row = out.sample(static_cast<int>(i));
    std::copy(zl.begin(), zl.end(), row);
    std::copy(zr.begin(), zr.end(), row + L);
  }
  return out;
}

double imprint_pretrain_loss(Models& m, const Tensor& object_codes, const Tensor& targets) {
  const bool was = m.embedding.training();
  m.embedding.set_training(false);
  const double loss = neural::mse_loss(m.embedding.forward(object_codes), targets);
  m.embedding.set_training(was);
  return loss;
}

double generated_feasibility(Models& m, std::span<const TsdfVolume> objects) {
  if (objects.empty()) return 0.0;
  int ok = 0;
  for (const TsdfVolume& o : objects) {
    const auto [l, r] = neural::generate(m, o);
    ok += fingerforge::check_feasibility(l).report.feasible && fingerforge::check_feasibility(r).report.feasible;
  }
  return static_cast<double>(ok) / static_cast<double>(objects.size());
}

GeneratorPretrainReport pretrain_generator(Models& m, std::span<const TsdfVolume> objects,
                                           std::span<const TsdfVolume> holdout, const GeneratorPretrainConfig& cfg,
                                           const Logger& log) {
  if (objects.empty()) throw std::invalid_argument("generator pretraining needs objects");
  if (cfg.epochs < 0 || cfg.batch < 1) throw std::invalid_argument("generator epochs must be >= 0 and batch >= 1");
  GeneratorPretrainReport rep;
  std::vector<const TsdfVolume*> ptrs;
  for (const TsdfVolume& o : objects) ptrs.push_back(&o);
  const Tensor codes = neural::encode_batch(m, neural::volumes_to_tensor(ptrs));
  const Tensor targets = imprint_targets(m, objects);
  rep.initial_loss = imprint_pretrain_loss(m, codes, targets);

  m.embedding.set_frozen(false);
  m.embedding.set_training(true);
  Adam opt(m.embedding.trainable(), cfg.adam);
  Rng rng(phase_seed(cfg.seed, kGeneratorPretrain));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : slices(rng.permutation(objects.size()), cfg.batch)) {
      opt.zero_grad();
      Tensor g;
      const double loss = neural::mse_loss(m.embedding.forward(gather_rows(codes, idx)), gather_rows(targets, idx), &g);
      m.embedding.backward(g);
      opt.step();
      total += loss * static_cast<double>(idx.size());
    }
    rep.epoch_loss.push_back(total / static_cast<double>(objects.size()));
    say(log, "generator pretrain epoch " + std::to_string(epoch + 1) + " loss " + fmt("%.6f", rep.epoch_loss.back()));
  }
  m.embedding.set_training(false);
  rep.final_loss = imprint_pretrain_loss(m, codes, targets);
  rep.holdout_feasibility = generated_feasibility(m, holdout);
  return rep;
}

// ---- fitness ----

std::vector<FitnessExample> load_examples(const datastore::Dataset& d) {
  std::vector<FitnessExample> out;
  out.reserve(d.size());
  for (const auto& r : d.records()) {
    auto v = d.load(r);
    FitnessExample e{std::move(v.object), std::move(v.left.volume), std::move(v.right.volume), {}};
    const auto bits = r.score.as_vector();
    std::copy(bits.begin(), bits.end(), e.target.begin());
    out.push_back(std::move(e));
  }
  return out;
}

BalancedSampler::BalancedSampler(std::vector<bool> labels, int batch, std::uint64_t seed)
    : batch_(batch), rng_state_(seed) {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos_ : neg_).push_back(i);
}

std::uint64_t BalancedSampler::next() { return splitmix(rng_state_); }

std::vector<std::size_t> BalancedSampler::permuted(const std::vector<std::size_t>& v) {
  std::vector<std::size_t> p = v;
  for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[next() % i]);
  return p;
}

std::size_t BalancedSampler::batches_per_epoch() const {
  const std::size_t n = pos_.size() + neg_.size();
  if (n == 0) return 0;
  if (!balanced()) {
    std::size_t k = (n + batch_ - 1) / batch_;
    if (k > 1 && n % batch_ == 1) --k;
    return k;
  }
  const std::size_t per_pos = std::max(1, batch_ / 2), per_neg = std::max(1, batch_ - batch_ / 2);
  return std::max((pos_.size() + per_pos - 1) / per_pos, (neg_.size() + per_neg - 1) / per_neg);
}

std::vector<std::vector<std::size_t>> BalancedSampler::epoch() {
  if (pos_.empty() && neg_.empty()) return {};
  if (!balanced()) {
    std::vector<std::size_t> all = pos_.empty() ? neg_ : pos_;
    return slices(permuted(all), batch_);
  }
  // Odd batches alternate which class gets the extra slot.
  const std::size_t k = batches_per_epoch();
  const std::vector<std::size_t> p = permuted(pos_), q = permuted(neg_);
  std::size_t ip = 0, iq = 0;
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < k; ++b) {
    const int half = batch_ / 2;
    const int np = (batch_ % 2 == 1 && b % 2 == 1) ? half + 1 : std::max(1, half);
    const int nq = std::max(1, batch_ - np);
    std::vector<std::size_t> batch;
    for (int i = 0; i < np; ++i) batch.push_back(ip < p.size() ? p[ip++] : pos_[next() % pos_.size()]);
    for (int i = 0; i < nq; ++i) batch.push_back(iq < q.size() ? q[iq++] : neg_[next() % neg_.size()]);
    out.push_back(std::move(batch));
  }
  return out;
}

json PhaseReport::to_json() const {
  return {{"epochs", epochs()}, {"final_loss", final_loss()}, {"reached_target", reached_target},
          {"epoch_loss", epoch_loss}, {"warnings", warnings}};
}

PhaseReport pretrain_fitness(Models& m, const std::vector<FitnessExample>& pool, const FitnessConfig& cfg,
                             const Logger& log) {
  return train_fitness(m, {}, pool, cfg, log);
}

PhaseReport train_fitness(Models& m, const std::vector<FitnessExample>& base, const std::vector<FitnessExample>& fresh,
                          const FitnessConfig& cfg, const Logger& log) {
  if (fresh.empty()) throw std::invalid_argument("fitness training needs examples");
  if (cfg.batch < 1 || cfg.min_epochs < 0 || cfg.max_epochs < cfg.min_epochs)
    throw std::invalid_argument("fitness config: need batch >= 1 and 0 <= min_epochs <= max_epochs");
  PhaseReport rep;
  BalancedSampler fs_(labels_of(fresh), cfg.batch, phase_seed(cfg.seed, kFitness));
  BalancedSampler bs(labels_of(base), cfg.batch, phase_seed(cfg.seed, kFitness + 100));
  for (const auto* s : {&fs_, &bs})
    if (!s->balanced() && s->batches_per_epoch() > 0)
      rep.warnings.push_back("fitness pool has a single success class; batches are unbalanced");
  for (const auto& w : rep.warnings) say(log, "warning: " + w);

  m.fitness.set_frozen(false);
  m.fitness.set_training(true);
  Adam opt(m.fitness.trainable(), cfg.adam);
  std::vector<std::vector<std::size_t>> base_queue;
  std::size_t base_at = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double total = 0.0;
    int steps = 0;
    for (const auto& idx : fs_.epoch()) {
      FitnessBatch batch;
      if (base.empty()) {
        batch = make_batch(fresh, idx);
      } else {
        if (base_at == base_queue.size()) {
          base_queue = bs.epoch();
          base_at = 0;
        }
        batch = make_batch(fresh, idx, &base, &base_queue[base_at++]);
      }
      total += fitness_step(m, opt, batch);
      ++steps;
    }
    rep.epoch_loss.push_back(total / std::max(1, steps));
    say(log, "fitness epoch " + std::to_string(epoch + 1) + " loss " + fmt("%.6f", rep.epoch_loss.back()));
    if (rep.epoch_loss.back() <= cfg.target_loss) rep.reached_target = true;
    if (epoch + 1 >= cfg.min_epochs && rep.epoch_loss.back() <= cfg.target_loss) break;
  }
  m.fitness.set_training(false);
  return rep;
}

// ---- generator ----

PhaseReport train_generator(Models& m, std::span<const TsdfVolume> objects, const GeneratorConfig& cfg,
                            const ObjectiveMask& mask, const Logger& log) {
  if (objects.empty()) throw std::invalid_argument("generator training needs objects");
  if (cfg.batch < 1 || cfg.steps_per_epoch < 1 || cfg.min_epochs < 0 || cfg.max_epochs < cfg.min_epochs)
    throw std::invalid_argument("generator config: need batch, steps >= 1 and 0 <= min_epochs <= max_epochs");
  PhaseReport rep;
  std::vector<const TsdfVolume*> ptrs;
  for (const TsdfVolume& o : objects) ptrs.push_back(&o);
  const Tensor all = neural::volumes_to_tensor(ptrs);
  const Tensor codes = neural::encode_batch(m, all);

  m.embedding.set_frozen(false);
  m.embedding.set_training(true);
  Adam opt(m.embedding.trainable(), cfg.adam);
  Rng rng(phase_seed(cfg.seed, kGenerator));
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    double total = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch));
      for (auto& i : idx) i = rng.index(objects.size());
      opt.zero_grad();
      total += neural::generator_step_loss(m, gather_rows(all, idx), gather_rows(codes, idx), mask);
      opt.step();
    }
    rep.epoch_loss.push_back(total / cfg.steps_per_epoch);
    say(log, "generator epoch " + std::to_string(epoch + 1) + " loss " + fmt("%.6f", rep.epoch_loss.back()));
    if (rep.epoch_loss.back() <= cfg.target_loss) rep.reached_target = true;
    if (epoch + 1 >= cfg.min_epochs && rep.epoch_loss.back() <= cfg.target_loss) break;
  }
  m.embedding.set_training(false);
  return rep;
}

// ---- co-training ----

void CotrainConfig::validate() const {
  if (cycles < 0) throw std::invalid_argument("cycles must be >= 0");
  if (objects_per_cycle < 1) throw std::invalid_argument("objects_per_cycle must be >= 1");
  if (fitness.batch < 1 || generator.batch < 1) throw std::invalid_argument("batch sizes must be >= 1");
  if (generator.steps_per_epoch < 1) throw std::invalid_argument("generator steps_per_epoch must be >= 1");
  if (fitness.min_epochs < 0 || fitness.min_epochs > fitness.max_epochs)
    throw std::invalid_argument("fitness epochs: need 0 <= min <= max");
  if (generator.min_epochs < 0 || generator.min_epochs > generator.max_epochs)
    throw std::invalid_argument("generator epochs: need 0 <= min <= max");
  if (!mask.success && !mask.stability && !mask.robustness) throw std::invalid_argument("objective mask is empty");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  if (!(fitness.adam.lr > 0) || !(generator.adam.lr > 0)) throw std::invalid_argument("learning rates must be positive");
  scene.validate();
  if (scene.robustness_angles.size() != 6) throw std::invalid_argument("training needs exactly six robustness angles");
}

CotrainConfig CotrainConfig::smoke() {
  CotrainConfig c;
  c.cycles = 2;
  c.objects_per_cycle = 16;
  c.fitness.max_epochs = 20;
  c.generator.steps_per_epoch = 20;
  c.generator.max_epochs = 10;
  return c;
}

json to_json(const CotrainConfig& c) {
  json scene;
  to_json(scene, c.scene);
  return {{"cycles", c.cycles},
          {"objects_per_cycle", c.objects_per_cycle},
          {"seed", c.seed},
          {"workers", c.workers},
          {"mask", c.mask.str()},
          {"scene", scene},
          {"fitness",
           {{"batch", c.fitness.batch},
            {"min_epochs", c.fitness.min_epochs},
            {"max_epochs", c.fitness.max_epochs},
            {"target_loss", c.fitness.target_loss},
            {"lr", c.fitness.adam.lr},
            {"weight_decay", c.fitness.adam.weight_decay}}},
          {"generator",
           {{"batch", c.generator.batch},
            {"min_epochs", c.generator.min_epochs},
            {"max_epochs", c.generator.max_epochs},
            {"target_loss", c.generator.target_loss},
            {"steps_per_epoch", c.generator.steps_per_epoch},
            {"lr", c.generator.adam.lr},
            {"weight_decay", c.generator.adam.weight_decay}}}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
      throw std::invalid_argument("unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
}

template <class T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(std::string("bad value for '") + key + "'");
    }
  }
}

}  // namespace

CotrainConfig cotrain_config_from_json(const json& j, CotrainConfig c) {
  reject_unknown(j, {"cycles", "objects_per_cycle", "seed", "workers", "mask", "scene", "fitness", "generator"}, "");
  take(j, "cycles", c.cycles);
  take(j, "objects_per_cycle", c.objects_per_cycle);
  take(j, "seed", c.seed);
  take(j, "workers", c.workers);
  if (j.contains("mask")) {
    std::string s;
    take(j, "mask", s);
    c.mask = ObjectiveMask::parse(s);
  }
  if (j.contains("scene")) from_json(j.at("scene"), c.scene);
  if (j.contains("fitness")) {
    const json& f = j.at("fitness");
    reject_unknown(f, {"batch", "min_epochs", "max_epochs", "target_loss", "lr", "weight_decay"}, "fitness");
    take(f, "batch", c.fitness.batch);
    take(f, "min_epochs", c.fitness.min_epochs);
    take(f, "max_epochs", c.fitness.max_epochs);
    take(f, "target_loss", c.fitness.target_loss);
    take(f, "lr", c.fitness.adam.lr);
    take(f, "weight_decay", c.fitness.adam.weight_decay);
  }
  if (j.contains("generator")) {
    const json& g = j.at("generator");
    reject_unknown(g, {"batch", "min_epochs", "max_epochs", "target_loss", "steps_per_epoch", "lr", "weight_decay"},
                   "generator");
    take(g, "batch", c.generator.batch);
    take(g, "min_epochs", c.generator.min_epochs);
    take(g, "max_epochs", c.generator.max_epochs);
    take(g, "target_loss", c.generator.target_loss);
    take(g, "steps_per_epoch", c.generator.steps_per_epoch);
    take(g, "lr", c.generator.adam.lr);
    take(g, "weight_decay", c.generator.adam.weight_decay);
  }
  c.validate();
  return c;
}

json CycleReport::to_json() const {
  return {{"cycle", cycle},
          {"objects", objects},
          {"dataset_size", dataset_size},
          {"feasibility_rate", feasibility_rate},
          {"success_rate", success_rate},
          {"mean_score", mean_score},
          {"fitness", fitness.to_json()},
          {"generator", generator.to_json()},
          {"losses_finite", losses_finite}};
}

namespace {

PhaseReport phase_from_json(const json& j) {
  PhaseReport p;
  p.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  p.reached_target = j.at("reached_target").get<bool>();
  p.warnings = j.at("warnings").get<std::vector<std::string>>();
  return p;
}

CycleReport cycle_from_json(const json& j) {
  CycleReport r;
  r.cycle = j.at("cycle").get<int>();
  r.objects = j.at("objects").get<int>();
  r.dataset_size = j.at("dataset_size").get<std::size_t>();
  r.feasibility_rate = j.at("feasibility_rate").get<double>();
  r.success_rate = j.at("success_rate").get<double>();
  r.mean_score = j.at("mean_score").get<double>();
  r.fitness = phase_from_json(j.at("fitness"));
  r.generator = phase_from_json(j.at("generator"));
  r.losses_finite = j.at("losses_finite").get<bool>();
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

}  // namespace

std::vector<CycleReport> cotrain(Models& m, std::span<const TargetObject> targets,
                                 const std::vector<FitnessExample>& pretrain_pool, const CotrainConfig& cfg,
                                 const fs::path& run_dir, const Logger& log) {
  cfg.validate();
  if (targets.empty()) throw std::invalid_argument("co-training needs target objects");
  fs::create_directories(run_dir);
  // Worker count does not affect results, so a resume may change it.
  json cfg_json = to_json(cfg);
  cfg_json.erase("workers");
  const fs::path cfg_path = run_dir / "config.json";
  if (fs::exists(cfg_path)) {
    if (read_json(cfg_path) != cfg_json)
      throw std::invalid_argument("run directory " + run_dir.string() + " was started with a different config");
  } else {
    write_text(cfg_path, cfg_json.dump(2) + "\n");
  }

  std::vector<CycleReport> reports;
  int done = 0;
  while (done < cfg.cycles && fs::exists(run_dir / cycle_name(done + 1) / "report.json")) {
    reports.push_back(cycle_from_json(read_json(run_dir / cycle_name(done + 1) / "report.json")));
    ++done;
  }
  if (done > 0) {
    m = neural::load_models(run_dir / cycle_name(done) / "weights");
    say(log, "resuming after cycle " + std::to_string(done));
  }
  for (Network* n : {&m.encoder, &m.decoder}) {
    n->set_frozen(true);
    n->set_training(false);
  }

  datastore::Dataset store = datastore::Dataset::open_or_create(run_dir / "dataset", "cotrain");
  store.truncate(static_cast<std::size_t>(done) * static_cast<std::size_t>(cfg.objects_per_cycle));
  std::vector<FitnessExample> fresh = load_examples(store);
  std::vector<TsdfVolume> target_vols;
  for (const auto& t : targets) target_vols.push_back(t.volume);
  const std::string hash = datastore::config_hash(cfg.scene);

  for (int cycle = done + 1; cycle <= cfg.cycles; ++cycle) {
    CycleReport rep;
    rep.cycle = cycle;
    rep.objects = cfg.objects_per_cycle;
    const std::uint64_t cseed = phase_seed(cfg.seed, kCycle + static_cast<std::uint64_t>(cycle));
    Rng rng(cseed);

    // 1. Generate fingers for sampled targets and simulate them.
    std::vector<std::size_t> picks(static_cast<std::size_t>(cfg.objects_per_cycle));
    for (auto& p : picks) p = rng.index(targets.size());
    std::vector<std::pair<Finger, Finger>> pairs;
    pairs.reserve(picks.size());
    for (std::size_t p : picks) pairs.push_back(neural::generate(m, targets[p].volume));
    std::vector<graspsim::EvaluationJob> jobs;
    for (std::size_t i = 0; i < picks.size(); ++i)
      jobs.push_back({targets[picks[i]].id, cycle_name(cycle), &targets[picks[i]].volume, &pairs[i].first,
                      &pairs[i].second, cfg.scene});
    const auto results = graspsim::evaluate_batch(jobs, cfg.workers);
    int feasible = 0, success = 0;
    double score_sum = 0.0;
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto& r = results[i];
      store.append(targets[picks[i]].id, targets[picks[i]].volume, pairs[i].first, pairs[i].second, r.score,
                   datastore::Provenance::Generated, hash);
      FitnessExample e{targets[picks[i]].volume, pairs[i].first.volume, pairs[i].second.volume, {}};
      const auto bits = r.score.as_vector();
      std::copy(bits.begin(), bits.end(), e.target.begin());
      fresh.push_back(std::move(e));
      feasible += r.feasible;
      success += r.score.success;
      score_sum += std::accumulate(bits.begin(), bits.end(), 0.0) / static_cast<double>(bits.size());
    }
    const double n = static_cast<double>(picks.size());
    rep.feasibility_rate = feasible / n;
    rep.success_rate = success / n;
    rep.mean_score = score_sum / n;
    rep.dataset_size = store.size();
    say(log, cycle_name(cycle) + ": feasible " + fmt("%.3f", rep.feasibility_rate) + ", success " +
                 fmt("%.3f", rep.success_rate));

    // 2. Refit the fitness network, 3. push the generator against it.
    FitnessConfig fc = cfg.fitness;
    fc.seed = phase_seed(cseed, kFitness);
    rep.fitness = train_fitness(m, pretrain_pool, fresh, fc, log);
    GeneratorConfig gc = cfg.generator;
    gc.seed = phase_seed(cseed, kGenerator);
    rep.generator = train_generator(m, target_vols, gc, cfg.mask, log);
    rep.losses_finite = finite_all(rep.fitness.epoch_loss) && finite_all(rep.generator.epoch_loss);

    // Weights go through their f32 file form so a resumed run continues from
    // exactly the state an uninterrupted run holds.
    const fs::path cdir = run_dir / cycle_name(cycle);
    neural::save_models(cdir / "weights", m);
    m = neural::load_models(cdir / "weights");
    for (Network* net : {&m.encoder, &m.decoder}) {
      net->set_frozen(true);
      net->set_training(false);
    }
    write_text(cdir / "report.json", rep.to_json().dump(2) + "\n");
    reports.push_back(std::move(rep));
  }
  return reports;
}

// ---- baselines and datasets ----

RandomEmbeddingResult optimize_random_embedding(Models& m, const TsdfVolume& object, const ObjectiveMask& mask,
                                                const RandomEmbeddingConfig& cfg) {
  if (cfg.steps < 0) throw std::invalid_argument("steps must be >= 0");
  const int L = m.latent_dim();
  Rng rng(phase_seed(cfg.seed, kRandEmb));
  Parameter zl{"left_code", {1, L}, std::vector<double>(L), std::vector<double>(L, 0.0), true};
  Parameter zr{"right_code", {1, L}, std::vector<double>(L), std::vector<double>(L, 0.0), true};
  for (auto* p : {&zl, &zr})
    for (double& v : p->value) v = rng.uniform(-1.0, 1.0);
  const TsdfVolume* one[] = {&object};
  const Tensor obj = neural::volumes_to_tensor(one);
  neural::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = 0.0;
  Adam opt({&zl, &zr}, ac);

  RandomEmbeddingResult res;
  std::vector<double> best_l = zl.value, best_r = zr.value;
  for (int step = 0; step <= cfg.steps; ++step) {
    Tensor gl, gr;
    const double fit = -neural::code_pair_loss(m, obj, Tensor({1, L}, zl.value), Tensor({1, L}, zr.value), mask,
                                               step < cfg.steps ? &gl : nullptr, step < cfg.steps ? &gr : nullptr);
    if (step == 0) {
      res.initial_fitness = res.best_fitness = fit;
    } else if (fit > res.best_fitness) {
      res.best_fitness = fit;
      res.best_step = step;
      best_l = zl.value;
      best_r = zr.value;
    }
    if (step == cfg.steps) break;
    zl.grad = gl.data;
    zr.grad = gr.data;
    opt.step();
    for (auto* p : {&zl, &zr})
      for (double& v : p->value) v = std::clamp(v, -1.0, 1.0);
  }
  res.left = Finger{neural::decode(m, best_l), fingerforge::Handedness::Left};
  res.right = Finger{neural::decode(m, best_r), fingerforge::Handedness::Right};
  res.left_report = fingerforge::check_feasibility(res.left).report;
  res.right_report = fingerforge::check_feasibility(res.right).report;
  return res;
}

std::optional<Finger> shape_finger(const TsdfVolume& shape, fingerforge::Handedness h) {
  auto s = fingerforge::slice_and_stretch(shape, h);
  if (!s.qualified) return std::nullopt;
  return std::move(s.finger);
}

void build_pretrain_dataset(std::span<const TargetObject> objects, datastore::Dataset& out,
                            const graspsim::SceneConfig& scene, std::uint64_t seed, int workers, const Logger& log) {
  Rng rng(phase_seed(seed, kPretrainData));
  struct Pending {
    std::size_t object;
    Finger left, right;
    datastore::Provenance provenance;
  };
  std::vector<Pending> pending;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    auto [l, r] = fingerforge::make_imprint_pair(objects[i].volume);
    pending.push_back({i, std::move(l), std::move(r), datastore::Provenance::Imprint});
    std::optional<Finger> sl, sr;
    for (std::size_t tries = 0; tries < 2 * objects.size() && !(sl && sr); ++tries) {
      const std::size_t j = rng.index(objects.size());
      if (objects.size() > 1 && j == i) continue;
      if (!sl) sl = shape_finger(objects[j].volume, fingerforge::Handedness::Left);
      else sr = shape_finger(objects[j].volume, fingerforge::Handedness::Right);
    }
    if (sl && sr) pending.push_back({i, std::move(*sl), std::move(*sr), datastore::Provenance::ShapenetStyle});
    else say(log, "no shape fingers qualified for " + objects[i].id);
  }
  std::vector<graspsim::EvaluationJob> jobs;
  for (const auto& p : pending)
    jobs.push_back({objects[p.object].id, datastore::to_string(p.provenance), &objects[p.object].volume, &p.left,
                    &p.right, scene});
  const auto results = graspsim::evaluate_batch(jobs, workers);
  const std::string hash = datastore::config_hash(scene);
  for (std::size_t k = 0; k < pending.size(); ++k)
    out.append(objects[pending[k].object].id, objects[pending[k].object].volume, pending[k].left, pending[k].right,
               results[k].score, pending[k].provenance, hash);
  say(log, "pretrain dataset: " + std::to_string(out.size()) + " records");
}

}  // namespace gripgen::trainloop
