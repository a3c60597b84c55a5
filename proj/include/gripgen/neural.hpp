#pragma once

// Small 3D conv-net toolkit with hand-written backward passes, and the four
// networks of the finger generator: shape encoder, shape decoder, embedding
// network and fitness network.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gripgen/fingerforge.hpp"
#include "gripgen/voxelgrid.hpp"

namespace gripgen::neural {

using fingerforge::Finger;
using voxelgrid::TsdfVolume;

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

/// Dense row-major array. Network tensors carry the batch as dimension 0.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  int batch() const { return shape.empty() ? 0 : shape[0]; }
  /// Elements per batch entry.
  std::size_t stride() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }
  double* sample(int b) { return data.data() + stride() * b; }
  const double* sample(int b) const { return data.data() + stride() * b; }
};

/// Trainable array plus its gradient. Non-trainable entries hold batch-norm
/// running statistics; they are saved but never optimized.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;
};

enum class LayerKind { Conv, ConvTranspose, Linear, BatchNorm, LeakyRelu, Relu, Sigmoid, Tanh, Residual, Reshape };

struct LayerSpec {
  LayerKind kind = LayerKind::Linear;
  int n = 0;  // output channels / features
  int k = 0;
  int s = 1;
  int pad = 0;
  Shape shape;  // Reshape target, per sample

  std::string str() const;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline constexpr double kLeakySlope = 0.01;

struct NetworkSpec {
  std::string name;
  /// Per-sample input shape: {C, D, H, W} for volumes, {F} for vectors.
  Shape input;
  std::vector<LayerSpec> layers;

  // Builders. conv/conv_t/fc append BatchNorm + LeakyReLU; the *_raw variants
  // leave the activation to the caller.
  NetworkSpec& conv(int n, int k, int s, int pad = 0);
  NetworkSpec& conv_t(int n, int k, int s, int pad = 0);
  NetworkSpec& fc(int n);
  NetworkSpec& conv_raw(int n, int k, int s, int pad = 0);
  NetworkSpec& conv_t_raw(int n, int k, int s, int pad = 0);
  NetworkSpec& fc_raw(int n);
  NetworkSpec& residual(int n);
  NetworkSpec& reshape(Shape s);
  NetworkSpec& act(LayerKind k);

  /// Per-sample shape after every layer (entry 0 is the input). Throws
  /// std::invalid_argument naming the first incompatible layer.
  std::vector<Shape> trace() const;
  Shape output() const { return trace().back(); }
  std::string str() const;
  std::uint64_t hash() const;
};

struct ArchitectureSpecs {
  int resolution = 0;
  int latent_dim = 0;
  NetworkSpec encoder, decoder, embedding, fitness;
};

inline constexpr std::array<int, 4> kSupportedResolutions{40, 20, 16, 8};

/// 2 * n^3 with n = round(7 r / 40), halves rounded up: 686 at 40, 128 at 20,
/// 54 at 16, 2 at 8.
int latent_dim_for(int resolution);

/// Throws std::invalid_argument for resolutions outside kSupportedResolutions.
ArchitectureSpecs build_default_specs(int resolution);

class Layer;

class Network {
 public:
  Network();
  Network(NetworkSpec spec, std::uint64_t seed);
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  ~Network();

  const NetworkSpec& spec() const { return spec_; }

  /// Caches activations for the next backward().
  Tensor forward(const Tensor& x);
  /// Returns d loss / d input. Parameter gradients accumulate unless frozen.
  Tensor backward(const Tensor& grad_out);

  void set_training(bool on);
  bool training() const { return training_; }
  /// Frozen networks still pass gradients to their input but skip weight
  /// gradients.
  void set_frozen(bool on) { frozen_ = on; }
  bool frozen() const { return frozen_; }

  void zero_grad();
  /// Every parameter, trainable or not, in a stable order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> trainable();

  /// On/off state of every ReLU-type unit in the last forward pass.
  std::vector<bool> gates() const;

 private:
  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
  bool training_ = true;
  bool frozen_ = false;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty added to the gradient.
  double weight_decay = 1e-5;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg = {});
  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// ---- losses: each returns the scalar and writes d loss / d input ----

inline constexpr double kBceEps = 1e-7;
inline constexpr int kObjectives = 11;

/// Mean binary cross entropy over every entry of `pred`.
double fitness_loss(const Tensor& pred, const Tensor& target, Tensor* grad = nullptr);

/// Which of the 11 objectives count. Groups are all-on or all-off.
struct ObjectiveMask {
  bool success = true;
  bool stability = true;
  bool robustness = true;

  std::array<bool, kObjectives> bits() const;
  std::string str() const;
  /// "all", "gs", "gs+s", "gs+r", "gs+s+r" (case-insensitive).
  static ObjectiveMask parse(const std::string& s);
  friend bool operator==(const ObjectiveMask&, const ObjectiveMask&) = default;
};

/// Negative mean of the masked fitness outputs over the batch.
double generator_loss(const Tensor& pred, const ObjectiveMask& mask, Tensor* grad = nullptr);

double mse_loss(const Tensor& pred, const Tensor& target, Tensor* grad = nullptr);

// ---- volumes and the generator pipeline ----

/// Stacks volumes into {B, 1, nz, ny, nx}. All volumes must share dims.
Tensor volumes_to_tensor(std::span<const TsdfVolume* const> volumes);
TsdfVolume tensor_to_volume(const Tensor& t, int index, const voxelgrid::GridGeometry& geometry);

/// {B, 1, N, N, 3N} frames of (left | object | right) along x.
Tensor fitness_input(std::span<const TsdfVolume* const> objects, std::span<const TsdfVolume* const> left,
                     std::span<const TsdfVolume* const> right);

struct Models {
  ArchitectureSpecs specs;
  Network encoder, decoder, embedding, fitness;

  Models() = default;
  Models(int resolution, std::uint64_t seed);
  int resolution() const { return specs.resolution; }
  int latent_dim() const { return specs.latent_dim; }
  voxelgrid::GridGeometry geometry() const { return voxelgrid::GridGeometry::cube(specs.resolution); }
};

/// Encoder output for a batch {B, 1, N, N, N} in eval mode: {B, latent}.
Tensor encode_batch(Models& m, const Tensor& volumes);
Tensor decode_batch(Models& m, const Tensor& codes);

std::vector<double> encode(Models& m, const TsdfVolume& v);
TsdfVolume decode(Models& m, std::span<const double> code);
std::pair<std::vector<double>, std::vector<double>> embed_fingers(Models& m, std::span<const double> object_code);
std::pair<Finger, Finger> generate(Models& m, const TsdfVolume& object);
std::array<double, kObjectives> fitness_predict(Models& m, const TsdfVolume& object, const Finger& left,
                                                const Finger& right);

/// Masked fitness of decoded finger codes. When the gradient pointers are
/// given, d loss / d code is written there; the decoder and fitness networks
/// are left unchanged (eval mode, frozen). Returns generator_loss.
double code_pair_loss(Models& m, const Tensor& objects, const Tensor& left_codes, const Tensor& right_codes,
                      const ObjectiveMask& mask, Tensor* grad_left = nullptr, Tensor* grad_right = nullptr);

/// Generator loss through embedding -> decoder -> fitness, accumulating
/// gradients into the embedding network only. `object_codes` are encoder
/// outputs for `objects`.
double generator_step_loss(Models& m, const Tensor& objects, const Tensor& object_codes, const ObjectiveMask& mask,
                           bool accumulate = true);

/// Central finite differences on `samples` randomly picked trainable entries.
/// `backprop` must zero the gradients and refill them for the current
/// weights; `loss` only evaluates. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double gradient_check(const std::function<double()>& loss, const std::function<void()>& backprop,
                      std::span<Parameter* const> params, int samples, std::uint64_t seed, double h = 1e-3,
                      double floor = 1e-5);

struct GradientCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  /// Draws discarded because the +h or -h evaluation flipped a gate.
  int skipped = 0;
};

/// Same check, but a draw whose difference stencil straddles a ReLU kink is
/// redrawn, since the difference quotient is not a derivative there. `gates`
/// reports the activation pattern of the most recent `loss` or `backprop`
/// evaluation. Gives up after 50 * samples draws.
GradientCheckResult gradient_check(const std::function<double()>& loss, const std::function<void()>& backprop,
                                   const std::function<std::vector<bool>()>& gates,
                                   std::span<Parameter* const> params, int samples, std::uint64_t seed,
                                   double h = 1e-3, double floor = 1e-5);

// ---- weights files ----

/// Writes manifest.json {resolution, latent_dim, spec_hash, networks} and
/// weights.bin (little-endian f32) into `dir`.
void save_weights(const std::filesystem::path& dir, int resolution, int latent_dim,
                  std::span<const std::pair<std::string, const Network*>> networks);
/// Loads the named networks; throws std::runtime_error when a network is
/// missing or its spec hash differs.
void load_weights(const std::filesystem::path& dir, std::span<const std::pair<std::string, Network*>> networks);

void save_models(const std::filesystem::path& dir, const Models& m);
/// Builds the architecture recorded in the manifest and fills every network.
Models load_models(const std::filesystem::path& dir);
/// Resolution recorded in a weights manifest.
int weights_resolution(const std::filesystem::path& dir);

}  // namespace gripgen::neural
