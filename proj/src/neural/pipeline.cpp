#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "gripgen/neural.hpp"

namespace gripgen::neural {

namespace fs = std::filesystem;

namespace {

// Puts networks in eval mode (optionally frozen) for a scope.
class EvalScope {
 public:
  EvalScope(std::initializer_list<Network*> nets, bool freeze) {
    for (Network* n : nets) {
      saved_.push_back({n, n->training(), n->frozen()});
      n->set_training(false);
      if (freeze) n->set_frozen(true);
    }
  }
  ~EvalScope() {
    for (const auto& s : saved_) {
      s.net->set_training(s.training);
      s.net->set_frozen(s.frozen);
    }
  }
  EvalScope(const EvalScope&) = delete;
  EvalScope& operator=(const EvalScope&) = delete;

 private:
  struct Saved {
    Network* net;
    bool training, frozen;
  };
  std::vector<Saved> saved_;
};

std::uint64_t mix(std::uint64_t x) {  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

Tensor rows(const Tensor& t, int first, int count) {
  Tensor out({count, static_cast<int>(t.stride())});
  std::copy(t.sample(first), t.sample(first) + t.stride() * count, out.data.begin());
  return out;
}

Tensor stack_rows(const Tensor& a, const Tensor& b) {
  Tensor out({a.batch() + b.batch(), static_cast<int>(a.stride())});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Volume batches {B, 1, n, n, n} -> frames {B, 1, n, n, 3n}.
Tensor frames(const Tensor& left, int left0, const Tensor& objects, const Tensor& right, int right0) {
  const int B = objects.batch(), n = objects.shape[2];
  Tensor out({B, 1, n, n, 3 * n});
  for (int b = 0; b < B; ++b) {
    const double* parts[3] = {left.sample(left0 + b), objects.sample(b), right.sample(right0 + b)};
    double* dst = out.sample(b);
    for (int row = 0; row < n * n; ++row)
      for (int p = 0; p < 3; ++p)
        std::copy(parts[p] + row * n, parts[p] + (row + 1) * n, dst + (row * 3 + p) * n);
  }
  return out;
}

}  // namespace

Tensor volumes_to_tensor(std::span<const TsdfVolume* const> volumes) {
  if (volumes.empty()) throw std::invalid_argument("no volumes to stack");
  const voxelgrid::Dims d = volumes.front()->dims();
  Tensor t({static_cast<int>(volumes.size()), 1, d.z, d.y, d.x});
  for (std::size_t b = 0; b < volumes.size(); ++b) {
    if (volumes[b]->dims() != d) throw voxelgrid::DimensionError("volumes in a batch must share dims");
    const auto vals = volumes[b]->values();
    std::copy(vals.begin(), vals.end(), t.sample(static_cast<int>(b)));
  }
  return t;
}

TsdfVolume tensor_to_volume(const Tensor& t, int index, const voxelgrid::GridGeometry& geometry) {
  if (t.stride() != geometry.dims.count()) throw voxelgrid::DimensionError("tensor sample does not match geometry");
  TsdfVolume v(geometry);
  const double* src = t.sample(index);
  auto dst = v.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(std::clamp(src[i], -1.0, 1.0));
  return v;
}

Tensor fitness_input(std::span<const TsdfVolume* const> objects, std::span<const TsdfVolume* const> left,
                     std::span<const TsdfVolume* const> right) {
  if (objects.size() != left.size() || objects.size() != right.size())
    throw std::invalid_argument("fitness_input: batch sizes differ");
  const Tensor o = volumes_to_tensor(objects), l = volumes_to_tensor(left), r = volumes_to_tensor(right);
  if (o.shape != l.shape || o.shape != r.shape) throw voxelgrid::DimensionError("fitness_input: volume dims differ");
  if (o.shape[2] != o.shape[3] || o.shape[3] != o.shape[4]) throw voxelgrid::DimensionError("volumes must be cubic");
  return frames(l, 0, o, r, 0);
}

Models::Models(int resolution, std::uint64_t seed)
    : specs(build_default_specs(resolution)),
      encoder(specs.encoder, mix(seed * 4 + 0)),
      decoder(specs.decoder, mix(seed * 4 + 1)),
      embedding(specs.embedding, mix(seed * 4 + 2)),
      fitness(specs.fitness, mix(seed * 4 + 3)) {}

Tensor encode_batch(Models& m, const Tensor& volumes) {
  EvalScope scope({&m.encoder}, false);
  return m.encoder.forward(volumes);
}

Tensor decode_batch(Models& m, const Tensor& codes) {
  EvalScope scope({&m.decoder}, false);
  return m.decoder.forward(codes);
}

std::vector<double> encode(Models& m, const TsdfVolume& v) {
  const TsdfVolume* one[] = {&v};
  return encode_batch(m, volumes_to_tensor(one)).data;
}

TsdfVolume decode(Models& m, std::span<const double> code) {
  if (static_cast<int>(code.size()) != m.latent_dim())
    throw std::invalid_argument("latent code has " + std::to_string(code.size()) + " values, expected " +
                                std::to_string(m.latent_dim()));
  const Tensor z({1, m.latent_dim()}, std::vector<double>(code.begin(), code.end()));
  return tensor_to_volume(decode_batch(m, z), 0, m.geometry());
}

std::pair<std::vector<double>, std::vector<double>> embed_fingers(Models& m, std::span<const double> object_code) {
  const int L = m.latent_dim();
  if (static_cast<int>(object_code.size()) != L) throw std::invalid_argument("object code has the wrong length");
  EvalScope scope({&m.embedding}, false);
  const Tensor e = m.embedding.forward(Tensor({1, L}, std::vector<double>(object_code.begin(), object_code.end())));
  return {std::vector<double>(e.data.begin(), e.data.begin() + L), std::vector<double>(e.data.begin() + L, e.data.end())};
}

std::pair<Finger, Finger> generate(Models& m, const TsdfVolume& object) {
  if (object.dims() != m.geometry().dims)
    throw voxelgrid::DimensionError("object resolution does not match the model resolution " +
                                    std::to_string(m.resolution()));
  const auto [zl, zr] = embed_fingers(m, encode(m, object));
  return {Finger{decode(m, zl), fingerforge::Handedness::Left}, Finger{decode(m, zr), fingerforge::Handedness::Right}};
}

std::array<double, kObjectives> fitness_predict(Models& m, const TsdfVolume& object, const Finger& left,
                                                const Finger& right) {
  const TsdfVolume* o[] = {&object};
  const TsdfVolume* l[] = {&left.volume};
  const TsdfVolume* r[] = {&right.volume};
  EvalScope scope({&m.fitness}, false);
  const Tensor y = m.fitness.forward(fitness_input(o, l, r));
  std::array<double, kObjectives> out{};
  std::copy(y.data.begin(), y.data.end(), out.begin());
  return out;
}

double code_pair_loss(Models& m, const Tensor& objects, const Tensor& left_codes, const Tensor& right_codes,
                      const ObjectiveMask& mask, Tensor* grad_left, Tensor* grad_right) {
  const int B = objects.batch();
  if (left_codes.batch() != B || right_codes.batch() != B) throw std::invalid_argument("code batch sizes differ");
  EvalScope scope({&m.decoder, &m.fitness}, true);
  const Tensor vols = m.decoder.forward(stack_rows(left_codes, right_codes));
  const Tensor pred = m.fitness.forward(frames(vols, 0, objects, vols, B));
  Tensor g;
  const double loss = generator_loss(pred, mask, grad_left || grad_right ? &g : nullptr);
  if (!grad_left && !grad_right) return loss;

  const Tensor gf = m.fitness.backward(g);
  const int n = objects.shape[2];
  Tensor dv(vols.shape);
  for (int b = 0; b < B; ++b) {
    const double* src = gf.sample(b);
    for (int row = 0; row < n * n; ++row) {
      std::copy(src + row * 3 * n, src + row * 3 * n + n, dv.sample(b) + row * n);
      std::copy(src + row * 3 * n + 2 * n, src + (row + 1) * 3 * n, dv.sample(B + b) + row * n);
    }
  }
  const Tensor dz = m.decoder.backward(dv);
  if (grad_left) *grad_left = rows(dz, 0, B);
  if (grad_right) *grad_right = rows(dz, B, B);
  return loss;
}

double generator_step_loss(Models& m, const Tensor& objects, const Tensor& object_codes, const ObjectiveMask& mask,
                           bool accumulate) {
  const int B = objects.batch(), L = m.latent_dim();
  const Tensor e = m.embedding.forward(object_codes);
  Tensor zl({B, L}), zr({B, L});
  for (int b = 0; b < B; ++b) {
    std::copy(e.sample(b), e.sample(b) + L, zl.sample(b));
    std::copy(e.sample(b) + L, e.sample(b) + 2 * L, zr.sample(b));
  }
  if (!accumulate) return code_pair_loss(m, objects, zl, zr, mask);
  Tensor gl, gr;
  const double loss = code_pair_loss(m, objects, zl, zr, mask, &gl, &gr);
  Tensor de(e.shape);
  for (int b = 0; b < B; ++b) {
    std::copy(gl.sample(b), gl.sample(b) + L, de.sample(b));
    std::copy(gr.sample(b), gr.sample(b) + L, de.sample(b) + L);
  }
  m.embedding.backward(de);
  return loss;
}

// ---- weights files ----

void save_weights(const fs::path& dir, int resolution, int latent_dim,
                  std::span<const std::pair<std::string, const Network*>> networks) {
  static_assert(std::endian::native == std::endian::little, "weights are written as native little-endian f32");
  fs::create_directories(dir);
  nlohmann::json manifest{{"format", "gripgen-weights"}, {"version", 1}, {"resolution", resolution},
                          {"latent_dim", latent_dim}};
  std::vector<float> blob;
  std::uint64_t combined = 1469598103934665603ull;
  nlohmann::json nets = nlohmann::json::array();
  for (const auto& [name, net] : networks) {
    const std::uint64_t h = net->spec().hash();
    combined = (combined ^ h) * 1099511628211ull;
    nlohmann::json params = nlohmann::json::array();
    for (const Parameter* p : net->parameters()) {
      params.push_back({{"name", p->name}, {"shape", p->shape}, {"offset", blob.size()}, {"count", p->value.size()}});
      for (double v : p->value) blob.push_back(static_cast<float>(v));
    }
    nets.push_back({{"name", name}, {"spec", net->spec().str()}, {"spec_hash", hex(h)}, {"params", params}});
  }
  manifest["spec_hash"] = hex(combined);
  manifest["networks"] = nets;

  const fs::path bin_tmp = dir / "weights.bin.tmp", json_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(bin_tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!out) throw std::runtime_error("cannot write " + bin_tmp.string());
  }
  {
    std::ofstream out(json_tmp, std::ios::trunc);
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + json_tmp.string());
  }
  fs::rename(bin_tmp, dir / "weights.bin");
  fs::rename(json_tmp, dir / "manifest.json");
}

namespace {

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing weights manifest in " + dir.string());
  try {
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != "gripgen-weights") throw std::runtime_error("not a weights manifest");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(dir.string() + "/manifest.json: " + e.what());
  }
}

}  // namespace

int weights_resolution(const fs::path& dir) { return read_manifest(dir).at("resolution").get<int>(); }

void load_weights(const fs::path& dir, std::span<const std::pair<std::string, Network*>> networks) {
  const nlohmann::json manifest = read_manifest(dir);
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw std::runtime_error("missing weights.bin in " + dir.string());
  const std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t floats = raw.size() / sizeof(float);

  for (const auto& [name, net] : networks) {
    const nlohmann::json* entry = nullptr;
    for (const auto& n : manifest.at("networks"))
      if (n.at("name") == name) entry = &n;
    if (!entry) throw std::runtime_error("weights in " + dir.string() + " have no network '" + name + "'");
    if (entry->at("spec_hash") != hex(net->spec().hash()))
      throw std::runtime_error("network '" + name + "' in " + dir.string() + " was saved for a different architecture");
    const auto params = net->parameters();
    const auto& saved = entry->at("params");
    if (saved.size() != params.size()) throw std::runtime_error("parameter count mismatch for '" + name + "'");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t off = saved[i].at("offset"), count = saved[i].at("count");
      if (saved[i].at("name") != params[i]->name || count != params[i]->value.size() || off + count > floats)
        throw std::runtime_error("corrupt parameter '" + params[i]->name + "' in " + dir.string());
      for (std::size_t j = 0; j < count; ++j) {
        float f;
        std::memcpy(&f, raw.data() + (off + j) * sizeof(float), sizeof(float));
        if (!std::isfinite(f)) throw std::runtime_error("non-finite weight in '" + params[i]->name + "'");
        params[i]->value[j] = f;
      }
    }
  }
}

void save_models(const fs::path& dir, const Models& m) {
  const std::pair<std::string, const Network*> nets[] = {
      {"encoder", &m.encoder}, {"decoder", &m.decoder}, {"embedding", &m.embedding}, {"fitness", &m.fitness}};
  save_weights(dir, m.resolution(), m.latent_dim(), nets);
}

Models load_models(const fs::path& dir) {
  Models m(weights_resolution(dir), 0);
  const std::pair<std::string, Network*> nets[] = {
      {"encoder", &m.encoder}, {"decoder", &m.decoder}, {"embedding", &m.embedding}, {"fitness", &m.fitness}};
  load_weights(dir, nets);
  return m;
}

}  // namespace gripgen::neural
