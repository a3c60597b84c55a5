#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "gripgen/neural.hpp"
#include "layers.hpp"

namespace gripgen::neural {

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::string shape_string(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) throw std::invalid_argument("tensor data does not match shape " + shape_string(shape));
}

// ---- specs ----

std::string LayerSpec::str() const {
  auto conv_args = [&] {
    return "(" + std::to_string(n) + "," + std::to_string(k) + "," + std::to_string(s) + ",p" + std::to_string(pad) + ")";
  };
  switch (kind) {
    case LayerKind::Conv: return "C" + conv_args();
    case LayerKind::ConvTranspose: return "CT" + conv_args();
    case LayerKind::Linear: return "FC(" + std::to_string(n) + ")";
    case LayerKind::BatchNorm: return "BN";
    case LayerKind::LeakyRelu: return "LReLU";
    case LayerKind::Relu: return "ReLU";
    case LayerKind::Sigmoid: return "Sigmoid";
    case LayerKind::Tanh: return "TanH";
    case LayerKind::Residual: return "R(" + std::to_string(n) + ")";
    case LayerKind::Reshape: return "Reshape(" + shape_string(shape) + ")";
  }
  return "?";
}

NetworkSpec& NetworkSpec::conv_raw(int n, int k, int s, int pad) {
  layers.push_back({LayerKind::Conv, n, k, s, pad, {}});
  return *this;
}
NetworkSpec& NetworkSpec::conv_t_raw(int n, int k, int s, int pad) {
  layers.push_back({LayerKind::ConvTranspose, n, k, s, pad, {}});
  return *this;
}
NetworkSpec& NetworkSpec::fc_raw(int n) {
  layers.push_back({LayerKind::Linear, n, 0, 1, 0, {}});
  return *this;
}
NetworkSpec& NetworkSpec::act(LayerKind k) {
  layers.push_back({k, 0, 0, 1, 0, {}});
  return *this;
}
NetworkSpec& NetworkSpec::conv(int n, int k, int s, int pad) {
  return conv_raw(n, k, s, pad).act(LayerKind::BatchNorm).act(LayerKind::LeakyRelu);
}
NetworkSpec& NetworkSpec::conv_t(int n, int k, int s, int pad) {
  return conv_t_raw(n, k, s, pad).act(LayerKind::BatchNorm).act(LayerKind::LeakyRelu);
}
NetworkSpec& NetworkSpec::fc(int n) { return fc_raw(n).act(LayerKind::BatchNorm).act(LayerKind::LeakyRelu); }
NetworkSpec& NetworkSpec::residual(int n) {
  layers.push_back({LayerKind::Residual, n, 3, 1, 1, {}});
  return *this;
}
NetworkSpec& NetworkSpec::reshape(Shape s) {
  layers.push_back({LayerKind::Reshape, 0, 0, 1, 0, std::move(s)});
  return *this;
}

std::vector<Shape> NetworkSpec::trace() const {
  std::vector<Shape> out{input};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const Shape& in = out.back();
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument(name + " layer " + std::to_string(i) + " " + l.str() + " on " + shape_string(in) +
                                  ": " + why);
    };
    Shape next;
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::ConvTranspose:
      case LayerKind::Residual: {
        if (in.size() != 4) fail("needs a C x D x H x W input");
        if (l.n < 1 || l.k < 1 || l.s < 1 || l.pad < 0) fail("bad layer parameters");
        next = {l.n, 0, 0, 0};
        for (int d = 1; d < 4; ++d) {
          int v = 0;
          if (l.kind == LayerKind::ConvTranspose) {
            v = (in[d] - 1) * l.s - 2 * l.pad + l.k;
          } else {
            if (in[d] + 2 * l.pad < l.k) fail("kernel larger than padded input");
            v = (in[d] + 2 * l.pad - l.k) / l.s + 1;
          }
          if (v < 1) fail("empty output");
          next[d] = v;
        }
        if (l.kind == LayerKind::Residual && (in[0] != l.n || next != in)) fail("residual must keep its shape");
        break;
      }
      case LayerKind::Linear:
        if (l.n < 1) fail("bad width");
        next = {l.n};
        break;
      case LayerKind::Reshape:
        if (shape_size(l.shape) != shape_size(in)) fail("element count differs");
        next = l.shape;
        break;
      default:
        if (in.empty()) fail("empty input");
        next = in;
        break;
    }
    out.push_back(std::move(next));
  }
  return out;
}

std::string NetworkSpec::str() const {
  std::ostringstream s;
  s << name << "[" << shape_string(input) << "]:";
  for (std::size_t i = 0; i < layers.size(); ++i) s << (i ? "-" : "") << layers[i].str();
  return s.str();
}

std::uint64_t NetworkSpec::hash() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : str()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

int latent_dim_for(int resolution) {
  const int n = (7 * resolution * 2 + 40) / 80;  // round(7r/40), halves up
  return 2 * n * n * n;
}

namespace {

// Embedding widths keep the full-scale ratios 2096 : 4096 : 2L per latent L.
int scaled(int full, int latent) { return static_cast<int>(std::lround(static_cast<double>(full) * latent / 686.0)); }

}  // namespace

ArchitectureSpecs build_default_specs(int resolution) {
  ArchitectureSpecs a;
  a.resolution = resolution;
  a.latent_dim = latent_dim_for(resolution);
  const int r = resolution, L = a.latent_dim;
  NetworkSpec& enc = a.encoder;
  NetworkSpec& dec = a.decoder;
  NetworkSpec& emb = a.embedding;
  NetworkSpec& fit = a.fitness;
  enc.name = "encoder";
  dec.name = "decoder";
  emb.name = "embedding";
  fit.name = "fitness";
  enc.input = {1, r, r, r};
  dec.input = {L};
  emb.input = {L};
  fit.input = {1, r, r, 3 * r};

  switch (resolution) {
    case 40:
      enc.conv(8, 3, 1).conv(16, 3, 1).conv(32, 3, 1).conv(64, 3, 1).conv(64, 3, 2);
      enc.conv(32, 3, 1).conv(16, 3, 1).conv(8, 3, 1).conv(4, 3, 1);
      dec.fc(1024).fc(2048).fc(4096).reshape({64, 4, 4, 4});
      dec.conv_t(64, 3, 1).conv_t(64, 3, 1).conv_t(32, 3, 3).conv_t(16, 3, 1).conv_t(8, 3, 1).conv_t(4, 3, 1);
      dec.conv_t(2, 3, 1).conv_t(1, 3, 1).conv_t(1, 3, 1).conv_t(1, 3, 1).conv_t_raw(1, 3, 1);
      fit.conv(32, 5, 2, 2).residual(32).residual(32);
      fit.conv(64, 3, 2, 1).residual(64).residual(64);
      fit.conv(128, 3, 2, 1).residual(128);
      fit.conv(256, 3, 2, 1).residual(256);
      fit.conv(512, 3, 2, 1).residual(512);
      fit.conv(1024, 3, 2, 1).residual(1024);
      fit.conv(1024, 3, 2, 1);
      fit.fc(512).fc(256).fc(128);
      break;
    case 20:
      enc.conv(8, 3, 1).conv(16, 3, 1).conv(32, 3, 1).conv(64, 3, 2).conv(4, 3, 1);
      dec.fc(128).fc(256).fc(512).reshape({8, 4, 4, 4});
      dec.conv_t(8, 3, 1).conv_t(4, 3, 3).conv_t_raw(1, 3, 1);
      fit.conv(16, 5, 2, 2).residual(16).conv(32, 3, 2, 1).residual(32).conv(64, 3, 2, 1).residual(64);
      fit.conv(128, 3, 2, 1).conv(128, 3, 2, 1).conv(128, 3, 2, 1);
      fit.fc(128).fc(64).fc(32);
      break;
    case 16:
      enc.conv(8, 3, 1).conv(16, 3, 1).conv(32, 3, 2).conv(4, 3, 1);
      dec.fc(128).fc(256).fc(1024).reshape({16, 4, 4, 4});
      dec.conv_t(16, 3, 3).conv_t(8, 3, 1).conv_t_raw(1, 3, 1);
      fit.conv(8, 5, 2, 2).residual(8).conv(16, 3, 2, 1).residual(16).conv(32, 3, 2, 1).residual(32);
      fit.conv(64, 3, 2, 1).conv(64, 3, 2, 1).conv(64, 3, 2, 1);
      fit.fc(64).fc(32).fc(16);
      break;
    case 8:
      enc.conv(8, 3, 1).conv(16, 3, 2).conv(4, 2, 1);
      dec.fc(16).fc(32).fc(64).reshape({8, 2, 2, 2});
      dec.conv_t(4, 3, 3).conv_t_raw(1, 3, 1);
      fit.conv(4, 5, 2, 2).residual(4).conv(8, 3, 2, 1).residual(8);
      fit.conv(16, 3, 2, 1).conv(16, 3, 2, 1).conv(16, 3, 2, 1);
      fit.fc(16).fc(8);
      break;
    default:
      throw std::invalid_argument("unsupported resolution " + std::to_string(resolution) +
                                  " (expected 40, 20, 16 or 8)");
  }
  // The encoder's flattened features are projected to a bounded latent.
  enc.fc_raw(L).act(LayerKind::Tanh);
  dec.act(LayerKind::Tanh);
  emb.fc(scaled(2096, L)).fc(scaled(4096, L)).fc_raw(2 * L).act(LayerKind::Tanh);
  fit.fc_raw(kObjectives).act(LayerKind::Sigmoid);
  for (const NetworkSpec* s : {&enc, &dec, &emb, &fit}) s->trace();
  return a;
}

// ---- network ----

Network::Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;
Network::~Network() = default;

Network::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  const std::vector<Shape> shapes = spec_.trace();
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i)
    layers_.push_back(make_layer(spec_.layers[i], shapes[i], rng, std::to_string(i) + "."));
}

Tensor Network::forward(const Tensor& x) {
  if (x.shape.empty() || Shape(x.shape.begin() + 1, x.shape.end()) != spec_.input) {
    throw std::invalid_argument(spec_.name + ": input " + shape_string(x.shape) + " does not match batch x " +
                                shape_string(spec_.input));
  }
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, training_);
  return h;
}

Tensor Network::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, !frozen_);
  return g;
}

void Network::set_training(bool on) { training_ = on; }

void Network::zero_grad() {
  for (Parameter* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_)
    for (Parameter* p : l->params()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> Network::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& l : layers_)
    for (Parameter* p : l->params()) out.push_back(p);
  return out;
}

std::vector<bool> Network::gates() const {
  std::vector<bool> out;
  for (const auto& l : layers_) l->gates(out);
  return out;
}

std::vector<Parameter*> Network::trainable() {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

// ---- optimizer ----

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j] + cfg_.weight_decay * p.value[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
      p.value[j] -= cfg_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

// ---- losses ----

double fitness_loss(const Tensor& pred, const Tensor& target, Tensor* grad) {
  if (pred.shape != target.shape) throw std::invalid_argument("fitness_loss: shape mismatch");
  if (pred.size() == 0) throw std::invalid_argument("fitness_loss: empty prediction");
  const double n = static_cast<double>(pred.size());
  double loss = 0.0;
  if (grad) *grad = Tensor(pred.shape);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred.data[i], kBceEps, 1.0 - kBceEps);
    const double t = target.data[i];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    // The clamp is flat outside [eps, 1 - eps].
    if (grad && pred.data[i] > kBceEps && pred.data[i] < 1.0 - kBceEps)
      grad->data[i] = (-t / p + (1.0 - t) / (1.0 - p)) / n;
  }
  return loss / n;
}

std::array<bool, kObjectives> ObjectiveMask::bits() const {
  std::array<bool, kObjectives> b{};
  b[0] = success;
  for (int i = 1; i < 5; ++i) b[i] = stability;
  for (int i = 5; i < kObjectives; ++i) b[i] = robustness;
  return b;
}

std::string ObjectiveMask::str() const {
  std::string s;
  if (success) s += "gs";
  if (stability) s += s.empty() ? "s" : "+s";
  if (robustness) s += s.empty() ? "r" : "+r";
  return s;
}

ObjectiveMask ObjectiveMask::parse(const std::string& text) {
  std::string s;
  for (char c : text) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "all") return {};
  ObjectiveMask m{false, false, false};
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "gs") m.success = true;
    else if (part == "s") m.stability = true;
    else if (part == "r") m.robustness = true;
    else throw std::invalid_argument("unknown objective group '" + part + "' in mask '" + text + "'");
  }
  if (!m.success && !m.stability && !m.robustness) throw std::invalid_argument("objective mask is empty");
  return m;
}

double generator_loss(const Tensor& pred, const ObjectiveMask& mask, Tensor* grad) {
  if (pred.shape.size() != 2 || pred.shape[1] != kObjectives)
    throw std::invalid_argument("generator_loss expects {B, 11} predictions");
  const auto bits = mask.bits();
  const int active = static_cast<int>(std::count(bits.begin(), bits.end(), true));
  if (active == 0) throw std::invalid_argument("objective mask is empty");
  const double n = static_cast<double>(active) * pred.batch();
  double sum = 0.0;
  if (grad) *grad = Tensor(pred.shape);
  for (int b = 0; b < pred.batch(); ++b)
    for (int i = 0; i < kObjectives; ++i) {
      if (!bits[i]) continue;
      sum += pred.sample(b)[i];
      if (grad) grad->sample(b)[i] = -1.0 / n;
    }
  return -sum / n;
}

double mse_loss(const Tensor& pred, const Tensor& target, Tensor* grad) {
  if (pred.size() != target.size() || pred.size() == 0) throw std::invalid_argument("mse_loss: size mismatch");
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  if (grad) *grad = Tensor(pred.shape);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    sum += d * d;
    if (grad) grad->data[i] = 2.0 * d / n;
  }
  return sum / n;
}

double gradient_check(const std::function<double()>& loss, const std::function<void()>& backprop,
                      std::span<Parameter* const> params, int samples, std::uint64_t seed, double h, double floor) {
  backprop();
  std::vector<std::pair<Parameter*, std::size_t>> pool;
  for (Parameter* p : params)
    if (p->trainable)
      for (std::size_t i = 0; i < p->value.size(); ++i) pool.emplace_back(p, i);
  if (pool.empty()) return 0.0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    auto [p, i] = pool[pick(rng)];
    const double analytic = p->grad[i];
    const double keep = p->value[i];
    p->value[i] = keep + h;
    const double up = loss();
    p->value[i] = keep - h;
    const double down = loss();
    p->value[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    worst = std::max(worst, rel);
  }
  return worst;
}

GradientCheckResult gradient_check(const std::function<double()>& loss, const std::function<void()>& backprop,
                                   const std::function<std::vector<bool>()>& gates,
                                   std::span<Parameter* const> params, int samples, std::uint64_t seed, double h,
                                   double floor) {
  GradientCheckResult res;
  backprop();
  const std::vector<bool> base = gates();
  std::vector<std::pair<Parameter*, std::size_t>> pool;
  for (Parameter* p : params)
    if (p->trainable)
      for (std::size_t i = 0; i < p->value.size(); ++i) pool.emplace_back(p, i);
  if (pool.empty()) return res;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (long draw = 0; res.checked < samples && draw < 50L * samples; ++draw) {
    auto [p, i] = pool[pick(rng)];
    const double keep = p->value[i];
    p->value[i] = keep + h;
    const double up = loss();
    const bool up_same = gates() == base;
    p->value[i] = keep - h;
    const double down = loss();
    const bool down_same = gates() == base;
    p->value[i] = keep;
    if (!up_same || !down_same) {
      ++res.skipped;
      continue;
    }
    const double analytic = p->grad[i];
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace gripgen::neural
