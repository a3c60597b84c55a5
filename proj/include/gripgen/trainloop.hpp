#pragma once

// Training phases: autoencoder pretraining, imprint pretraining of the
// generator, fitness pretraining, the co-training loop and the random
// embedding baseline.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gripgen/datastore.hpp"
#include "gripgen/fingerforge.hpp"
#include "gripgen/graspsim.hpp"
#include "gripgen/neural.hpp"

namespace gripgen::trainloop {

using fingerforge::Finger;
using neural::Models;
using neural::ObjectiveMask;
using voxelgrid::TsdfVolume;

/// Progress lines; the default drops them.
using Logger = std::function<void(const std::string&)>;

/// Per-phase seed derived from a run seed and a phase tag.
std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t tag);

// ---- autoencoder ----

struct AutoencoderConfig {
  int epochs = 50;
  int batch = 8;
  std::uint64_t seed = 0;
  neural::AdamConfig adam;
};

struct AutoencoderReport {
  std::vector<double> epoch_loss;
  /// Every 5-epoch window ends no higher than it starts.
  bool windows_non_increasing = true;
};

/// Trains encoder and decoder on reconstruction MSE, then leaves both in eval
/// mode and frozen. Throws std::invalid_argument on an empty corpus.
AutoencoderReport pretrain_autoencoder(Models& m, std::span<const TsdfVolume> fingers, const AutoencoderConfig& cfg,
                                       const Logger& log = {});

/// Occupancy IoU between a volume and its reconstruction.
double reconstruction_iou(Models& m, const TsdfVolume& v);
double mean_reconstruction_iou(Models& m, std::span<const TsdfVolume> volumes);

// ---- generator imprint pretraining ----

struct GeneratorPretrainConfig {
  int epochs = 30;
  int batch = 16;
  std::uint64_t seed = 0;
  neural::AdamConfig adam;
};

struct GeneratorPretrainReport {
  std::vector<double> epoch_loss;
  /// Full-corpus latent MSE before and after, embedding in eval mode.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  /// Share of `holdout` objects whose generated pair is feasible on both sides.
  double holdout_feasibility = 0.0;
};

/// {B, 2L} rows of (encode(left imprint), encode(right imprint)).
neural::Tensor imprint_targets(Models& m, std::span<const TsdfVolume> objects);

/// Latent-space MSE between embedding outputs and imprint targets.
double imprint_pretrain_loss(Models& m, const neural::Tensor& object_codes, const neural::Tensor& targets);

GeneratorPretrainReport pretrain_generator(Models& m, std::span<const TsdfVolume> objects,
                                           std::span<const TsdfVolume> holdout, const GeneratorPretrainConfig& cfg,
                                           const Logger& log = {});

/// Share of objects whose generated pair passes the feasibility check on both sides.
double generated_feasibility(Models& m, std::span<const TsdfVolume> objects);

// ---- fitness ----

struct FitnessExample {
  TsdfVolume object;
  TsdfVolume left;
  TsdfVolume right;
  std::array<float, neural::kObjectives> target{};

  bool success() const { return target[0] >= 0.5f; }
};

std::vector<FitnessExample> load_examples(const datastore::Dataset& d);

/// Batches balanced on the success bit. Each epoch walks a fresh permutation
/// of both classes; a class that runs out is drawn with replacement until the
/// larger class has been seen once. With a single class the batches are plain
/// shuffled slices and `balanced()` is false.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<bool> labels, int batch, std::uint64_t seed);
  bool balanced() const { return !pos_.empty() && !neg_.empty(); }
  std::vector<std::vector<std::size_t>> epoch();
  std::size_t batches_per_epoch() const;

 private:
  std::vector<std::size_t> pos_, neg_;
  int batch_;
  std::uint64_t rng_state_;
  std::uint64_t next();
  std::vector<std::size_t> permuted(const std::vector<std::size_t>& v);
};

struct FitnessConfig {
  /// Batch size drawn from each pool.
  int batch = 16;
  int min_epochs = 5;
  int max_epochs = 50;
  double target_loss = 0.2;
  std::uint64_t seed = 0;
  neural::AdamConfig adam;
};

struct PhaseReport {
  std::vector<double> epoch_loss;
  bool reached_target = false;
  std::vector<std::string> warnings;

  int epochs() const { return static_cast<int>(epoch_loss.size()); }
  double final_loss() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
  nlohmann::json to_json() const;
};

/// Fitness training on one pool. Stops after min_epochs once the epoch mean
/// loss reaches target_loss, or at max_epochs.
PhaseReport pretrain_fitness(Models& m, const std::vector<FitnessExample>& pool, const FitnessConfig& cfg,
                             const Logger& log = {});

/// Each step draws `batch` balanced examples from both pools. An epoch is one
/// balanced pass over `fresh`; `base` is sampled continuously across epochs.
/// An empty `base` degenerates to pretrain_fitness on `fresh`.
PhaseReport train_fitness(Models& m, const std::vector<FitnessExample>& base, const std::vector<FitnessExample>& fresh,
                          const FitnessConfig& cfg, const Logger& log = {});

// ---- generator against the fitness network ----

struct GeneratorConfig {
  int min_epochs = 5;
  int max_epochs = 50;
  double target_loss = -0.9;
  int steps_per_epoch = 500;
  int batch = 32;
  std::uint64_t seed = 0;
  neural::AdamConfig adam;
};

/// Embedding updates on batches drawn uniformly from `objects`; decoder and
/// fitness networks stay frozen.
PhaseReport train_generator(Models& m, std::span<const TsdfVolume> objects, const GeneratorConfig& cfg,
                            const ObjectiveMask& mask, const Logger& log = {});

// ---- co-training ----

struct CotrainConfig {
  int cycles = 20;
  int objects_per_cycle = 512;
  FitnessConfig fitness;
  GeneratorConfig generator;
  ObjectiveMask mask;
  std::uint64_t seed = 0;
  int workers = 1;
  graspsim::SceneConfig scene;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
  /// 2 cycles x 16 objects with short, capped generator and fitness phases.
  static CotrainConfig smoke();
};

nlohmann::json to_json(const CotrainConfig& c);
/// Missing keys keep defaults; unknown keys throw std::invalid_argument.
CotrainConfig cotrain_config_from_json(const nlohmann::json& j, CotrainConfig base = {});

struct CycleReport {
  int cycle = 0;
  int objects = 0;
  std::size_t dataset_size = 0;
  double feasibility_rate = 0.0;
  double success_rate = 0.0;
  /// Mean over records of the mean of the 11 score bits.
  double mean_score = 0.0;
  PhaseReport fitness;
  PhaseReport generator;
  bool losses_finite = true;

  nlohmann::json to_json() const;
};

struct TargetObject {
  std::string id;
  TsdfVolume volume;
};

/// Runs the cycles not yet completed in `run_dir`:
///   config.json, dataset/ (grasp records of generated fingers),
///   cycle_NN/weights/, cycle_NN/report.json (written last).
/// Resuming reloads the newest complete cycle's weights and drops dataset
/// records appended after it. `m` must hold pretrained weights and is left
/// holding the final ones.
std::vector<CycleReport> cotrain(Models& m, std::span<const TargetObject> targets,
                                 const std::vector<FitnessExample>& pretrain_pool, const CotrainConfig& cfg,
                                 const std::filesystem::path& run_dir, const Logger& log = {});

// ---- baselines and datasets ----

struct RandomEmbeddingResult {
  Finger left;
  Finger right;
  fingerforge::FeasibilityReport left_report;
  fingerforge::FeasibilityReport right_report;
  double initial_fitness = 0.0;
  double best_fitness = 0.0;
  int best_step = 0;
};

struct RandomEmbeddingConfig {
  int steps = 200;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

/// Adam ascent of the masked mean fitness over two random codes, clamped to
/// [-1, 1] after every step; the best codes seen (step 0 included) are decoded.
RandomEmbeddingResult optimize_random_embedding(Models& m, const TsdfVolume& object, const ObjectiveMask& mask,
                                                const RandomEmbeddingConfig& cfg = {});

/// Finger from another object's volume by slice-and-stretch; nullopt when no
/// plane qualifies.
std::optional<Finger> shape_finger(const TsdfVolume& shape, fingerforge::Handedness h);

/// Simulates an imprint pair and a shape-finger pair for every object and
/// appends them to `out` (provenance imprint and shapenet_style). Shape
/// fingers come from other objects of the list, chosen by `seed`.
void build_pretrain_dataset(std::span<const TargetObject> objects, datastore::Dataset& out,
                            const graspsim::SceneConfig& scene, std::uint64_t seed, int workers = 1,
                            const Logger& log = {});

}  // namespace gripgen::trainloop
