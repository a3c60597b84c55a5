#include "layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gripgen::neural {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Patch geometry shared by conv and transposed conv. `image` is the padded
// side (conv input, transposed-conv output); `cols` has one column per
// position of the strided side.
struct Patch {
  int c = 0;
  std::array<int, 3> image{};
  std::array<int, 3> pos{};
  int k = 0, s = 1, p = 0;

  int rows() const { return c * k * k * k; }
  int positions() const { return pos[0] * pos[1] * pos[2]; }
  std::size_t image_size() const { return static_cast<std::size_t>(c) * image[0] * image[1] * image[2]; }
};

void im2col(const Patch& g, const double* img, double* cols) {
  const int P = g.positions();
  const int k = g.k;
  for (int ch = 0; ch < g.c; ++ch)
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b)
        for (int e = 0; e < k; ++e) {
          double* row = cols + static_cast<std::size_t>(((ch * k + a) * k + b) * k + e) * P;
          const double* src = img + static_cast<std::size_t>(ch) * g.image[0] * g.image[1] * g.image[2];
          int q = 0;
          for (int od = 0; od < g.pos[0]; ++od) {
            const int id = od * g.s - g.p + a;
            const bool dok = id >= 0 && id < g.image[0];
            for (int oh = 0; oh < g.pos[1]; ++oh) {
              const int ih = oh * g.s - g.p + b;
              const bool hok = dok && ih >= 0 && ih < g.image[1];
              const double* line = src + (static_cast<std::size_t>(id) * g.image[1] + ih) * g.image[2];
              for (int ow = 0; ow < g.pos[2]; ++ow, ++q) {
                const int iw = ow * g.s - g.p + e;
                row[q] = hok && iw >= 0 && iw < g.image[2] ? line[iw] : 0.0;
              }
            }
          }
        }
}

// Adjoint of im2col: accumulates columns back into the image.
void col2im(const Patch& g, const double* cols, double* img) {
  const int P = g.positions();
  const int k = g.k;
  for (int ch = 0; ch < g.c; ++ch)
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b)
        for (int e = 0; e < k; ++e) {
          const double* row = cols + static_cast<std::size_t>(((ch * k + a) * k + b) * k + e) * P;
          double* dst = img + static_cast<std::size_t>(ch) * g.image[0] * g.image[1] * g.image[2];
          int q = 0;
          for (int od = 0; od < g.pos[0]; ++od) {
            const int id = od * g.s - g.p + a;
            const bool dok = id >= 0 && id < g.image[0];
            for (int oh = 0; oh < g.pos[1]; ++oh) {
              const int ih = oh * g.s - g.p + b;
              const bool hok = dok && ih >= 0 && ih < g.image[1];
              double* line = dst + (static_cast<std::size_t>(id) * g.image[1] + ih) * g.image[2];
              for (int ow = 0; ow < g.pos[2]; ++ow, ++q) {
                const int iw = ow * g.s - g.p + e;
                if (hok && iw >= 0 && iw < g.image[2]) line[iw] += row[q];
              }
            }
          }
        }
}

Parameter make_param(const std::string& name, Shape shape, bool trainable = true) {
  Parameter p;
  p.name = name;
  p.value.assign(shape_size(shape), 0.0);
  p.grad.assign(p.value.size(), 0.0);
  p.shape = std::move(shape);
  p.trainable = trainable;
  return p;
}

void init_normal(Parameter& p, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 0.02);
  for (double& v : p.value) v = nd(rng);
}

Shape with_batch(int b, const Shape& s) {
  Shape out{b};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

class Conv final : public Layer {
 public:
  Conv(const LayerSpec& sp, const Shape& in, std::mt19937_64& rng, const std::string& prefix)
      : w_(make_param(prefix + "weight", {sp.n, in[0], sp.k, sp.k, sp.k})), b_(make_param(prefix + "bias", {sp.n})) {
    g_.c = in[0];
    g_.image = {in[1], in[2], in[3]};
    for (int d = 0; d < 3; ++d) g_.pos[d] = (in[d + 1] + 2 * sp.pad - sp.k) / sp.s + 1;
    g_.k = sp.k;
    g_.s = sp.s;
    g_.p = sp.pad;
    out_ = {sp.n, g_.pos[0], g_.pos[1], g_.pos[2]};
    init_normal(w_, rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    x_ = x;
    const int B = x.batch(), P = g_.positions(), R = g_.rows(), n = out_[0];
    Tensor y(with_batch(B, out_));
    std::vector<double> cols(static_cast<std::size_t>(R) * P);
    CMapMat W(w_.value.data(), n, R);
    for (int b = 0; b < B; ++b) {
      im2col(g_, x.sample(b), cols.data());
      MapMat Y(y.sample(b), n, P);
      Y.noalias() = W * CMapMat(cols.data(), R, P);
      for (int c = 0; c < n; ++c) Y.row(c).array() += b_.value[c];
    }
    return y;
  }

  Tensor backward(const Tensor& g, bool param_grads) override {
    const int B = g.batch(), P = g_.positions(), R = g_.rows(), n = out_[0];
    Tensor dx(x_.shape);
    std::vector<double> cols(static_cast<std::size_t>(R) * P), dcols(cols.size());
    CMapMat W(w_.value.data(), n, R);
    MapMat dW(w_.grad.data(), n, R);
    for (int b = 0; b < B; ++b) {
      CMapMat G(g.sample(b), n, P);
      if (param_grads) {
        im2col(g_, x_.sample(b), cols.data());
        dW.noalias() += G * CMapMat(cols.data(), R, P).transpose();
        for (int c = 0; c < n; ++c) b_.grad[c] += G.row(c).sum();
      }
      MapMat(dcols.data(), R, P).noalias() = W.transpose() * G;
      col2im(g_, dcols.data(), dx.sample(b));
    }
    return dx;
  }

  std::vector<Parameter*> params() override { return {&w_, &b_}; }

 private:
  Parameter w_, b_;
  Patch g_;
  Shape out_;
  Tensor x_;
};

class ConvTranspose final : public Layer {
 public:
  ConvTranspose(const LayerSpec& sp, const Shape& in, std::mt19937_64& rng, const std::string& prefix)
      : w_(make_param(prefix + "weight", {in[0], sp.n, sp.k, sp.k, sp.k})), b_(make_param(prefix + "bias", {sp.n})) {
    cin_ = in[0];
    g_.c = sp.n;
    g_.pos = {in[1], in[2], in[3]};
    for (int d = 0; d < 3; ++d) g_.image[d] = (in[d + 1] - 1) * sp.s - 2 * sp.pad + sp.k;
    g_.k = sp.k;
    g_.s = sp.s;
    g_.p = sp.pad;
    out_ = {sp.n, g_.image[0], g_.image[1], g_.image[2]};
    init_normal(w_, rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    x_ = x;
    const int B = x.batch(), P = g_.positions(), R = g_.rows();
    Tensor y(with_batch(B, out_));
    std::vector<double> cols(static_cast<std::size_t>(R) * P);
    CMapMat W(w_.value.data(), cin_, R);
    const std::size_t vox = static_cast<std::size_t>(g_.image[0]) * g_.image[1] * g_.image[2];
    for (int b = 0; b < B; ++b) {
      MapMat(cols.data(), R, P).noalias() = W.transpose() * CMapMat(x.sample(b), cin_, P);
      double* yb = y.sample(b);
      col2im(g_, cols.data(), yb);
      for (int c = 0; c < g_.c; ++c)
        for (std::size_t i = 0; i < vox; ++i) yb[c * vox + i] += b_.value[c];
    }
    return y;
  }

  Tensor backward(const Tensor& g, bool param_grads) override {
    const int B = g.batch(), P = g_.positions(), R = g_.rows();
    Tensor dx(x_.shape);
    std::vector<double> cols(static_cast<std::size_t>(R) * P);
    CMapMat W(w_.value.data(), cin_, R);
    MapMat dW(w_.grad.data(), cin_, R);
    const std::size_t vox = static_cast<std::size_t>(g_.image[0]) * g_.image[1] * g_.image[2];
    for (int b = 0; b < B; ++b) {
      im2col(g_, g.sample(b), cols.data());
      CMapMat GC(cols.data(), R, P);
      MapMat(dx.sample(b), cin_, P).noalias() = W * GC;
      if (param_grads) {
        dW.noalias() += CMapMat(x_.sample(b), cin_, P) * GC.transpose();
        const double* gb = g.sample(b);
        for (int c = 0; c < g_.c; ++c)
          for (std::size_t i = 0; i < vox; ++i) b_.grad[c] += gb[c * vox + i];
      }
    }
    return dx;
  }

  std::vector<Parameter*> params() override { return {&w_, &b_}; }

 private:
  Parameter w_, b_;
  int cin_ = 0;
  Patch g_;
  Shape out_;
  Tensor x_;
};

class Linear final : public Layer {
 public:
  Linear(const LayerSpec& sp, const Shape& in, std::mt19937_64& rng, const std::string& prefix)
      : in_(static_cast<int>(shape_size(in))),
        out_(sp.n),
        w_(make_param(prefix + "weight", {sp.n, static_cast<int>(shape_size(in))})),
        b_(make_param(prefix + "bias", {sp.n})) {
    init_normal(w_, rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    x_ = x;
    const int B = x.batch();
    Tensor y({B, out_});
    MapMat Y(y.data.data(), B, out_);
    Y.noalias() = CMapMat(x.data.data(), B, in_) * CMapMat(w_.value.data(), out_, in_).transpose();
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b_.value.data(), out_);
    return y;
  }

  Tensor backward(const Tensor& g, bool param_grads) override {
    const int B = g.batch();
    CMapMat G(g.data.data(), B, out_);
    if (param_grads) {
      MapMat(w_.grad.data(), out_, in_).noalias() += G.transpose() * CMapMat(x_.data.data(), B, in_);
      Eigen::Map<Eigen::RowVectorXd>(b_.grad.data(), out_) += G.colwise().sum();
    }
    Tensor dx(x_.shape);
    MapMat(dx.data.data(), B, in_).noalias() = G * CMapMat(w_.value.data(), out_, in_);
    return dx;
  }

  std::vector<Parameter*> params() override { return {&w_, &b_}; }

 private:
  int in_, out_;
  Parameter w_, b_;
  Tensor x_;
};

class BatchNorm final : public Layer {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm(const Shape& in, const std::string& prefix)
      : c_(in[0]),
        gamma_(make_param(prefix + "weight", {in[0]})),
        beta_(make_param(prefix + "bias", {in[0]})),
        mean_(make_param(prefix + "running_mean", {in[0]}, false)),
        var_(make_param(prefix + "running_var", {in[0]}, false)) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
    std::fill(var_.value.begin(), var_.value.end(), 1.0);
  }

  Tensor forward(const Tensor& x, bool training) override {
    const int B = x.batch();
    const std::size_t sp = x.stride() / c_;
    Tensor y(x.shape);
    training_ = training;
    inv_std_.assign(c_, 0.0);
    if (training) xhat_ = Tensor(x.shape);
    for (int c = 0; c < c_; ++c) {
      double mean = 0.0, var = 0.0;
      const double m = static_cast<double>(B) * sp;
      if (training) {
        for (int b = 0; b < B; ++b) {
          const double* p = x.sample(b) + c * sp;
          for (std::size_t i = 0; i < sp; ++i) mean += p[i];
        }
        mean /= m;
        for (int b = 0; b < B; ++b) {
          const double* p = x.sample(b) + c * sp;
          for (std::size_t i = 0; i < sp; ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= m;
        mean_.value[c] = (1 - kMomentum) * mean_.value[c] + kMomentum * mean;
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        var_.value[c] = (1 - kMomentum) * var_.value[c] + kMomentum * unbiased;
      } else {
        mean = mean_.value[c];
        var = var_.value[c];
      }
      const double inv = 1.0 / std::sqrt(var + kEps);
      inv_std_[c] = inv;
      for (int b = 0; b < B; ++b) {
        const double* p = x.sample(b) + c * sp;
        double* q = y.sample(b) + c * sp;
        double* h = training ? xhat_.sample(b) + c * sp : nullptr;
        for (std::size_t i = 0; i < sp; ++i) {
          const double xh = (p[i] - mean) * inv;
          if (h) h[i] = xh;
          q[i] = gamma_.value[c] * xh + beta_.value[c];
        }
      }
    }
    if (!training) x_ = x;
    return y;
  }

  Tensor backward(const Tensor& g, bool param_grads) override {
    const int B = g.batch();
    const std::size_t sp = g.stride() / c_;
    Tensor dx(g.shape);
    for (int c = 0; c < c_; ++c) {
      const double m = static_cast<double>(B) * sp;
      double sum_g = 0.0, sum_gx = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* gp = g.sample(b) + c * sp;
        for (std::size_t i = 0; i < sp; ++i) {
          const double xh = training_ ? xhat_.sample(b)[c * sp + i]
                                      : (x_.sample(b)[c * sp + i] - mean_.value[c]) * inv_std_[c];
          sum_g += gp[i];
          sum_gx += gp[i] * xh;
        }
      }
      if (param_grads) {
        gamma_.grad[c] += sum_gx;
        beta_.grad[c] += sum_g;
      }
      const double scale = gamma_.value[c] * inv_std_[c];
      for (int b = 0; b < B; ++b) {
        const double* gp = g.sample(b) + c * sp;
        double* dp = dx.sample(b) + c * sp;
        if (training_) {
          const double* h = xhat_.sample(b) + c * sp;
          for (std::size_t i = 0; i < sp; ++i) dp[i] = scale * (gp[i] - sum_g / m - h[i] * sum_gx / m);
        } else {
          for (std::size_t i = 0; i < sp; ++i) dp[i] = scale * gp[i];
        }
      }
    }
    return dx;
  }

  std::vector<Parameter*> params() override { return {&gamma_, &beta_, &mean_, &var_}; }

 private:
  int c_;
  Parameter gamma_, beta_, mean_, var_;
  bool training_ = true;
  std::vector<double> inv_std_;
  Tensor xhat_, x_;
};

class Activation final : public Layer {
 public:
  explicit Activation(LayerKind k) : kind_(k) {}

  Tensor forward(const Tensor& x, bool) override {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x.data[i];
      switch (kind_) {
        case LayerKind::LeakyRelu: y.data[i] = v > 0 ? v : kLeakySlope * v; break;
        case LayerKind::Relu: y.data[i] = v > 0 ? v : 0.0; break;
        case LayerKind::Sigmoid: y.data[i] = 1.0 / (1.0 + std::exp(-v)); break;
        case LayerKind::Tanh: y.data[i] = std::tanh(v); break;
        default: throw std::logic_error("not an activation");
      }
    }
    x_ = x;
    y_ = y;
    return y;
  }

  Tensor backward(const Tensor& g, bool) override {
    Tensor dx(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x_.data[i], y = y_.data[i];
      double d = 0.0;
      switch (kind_) {
        case LayerKind::LeakyRelu: d = v > 0 ? 1.0 : kLeakySlope; break;
        case LayerKind::Relu: d = v > 0 ? 1.0 : 0.0; break;
        case LayerKind::Sigmoid: d = y * (1.0 - y); break;
        case LayerKind::Tanh: d = 1.0 - y * y; break;
        default: break;
      }
      dx.data[i] = g.data[i] * d;
    }
    return dx;
  }

  void gates(std::vector<bool>& out) const override {
    if (kind_ != LayerKind::Relu && kind_ != LayerKind::LeakyRelu) return;
    for (double v : x_.data) out.push_back(v > 0);
  }

 private:
  LayerKind kind_;
  Tensor x_, y_;
};

class Residual final : public Layer {
 public:
  Residual(const LayerSpec& sp, const Shape& in, std::mt19937_64& rng, const std::string& prefix)
      : c1_(LayerSpec{LayerKind::Conv, sp.n, 3, 1, 1, {}}, in, rng, prefix + "conv1."),
        c2_(LayerSpec{LayerKind::Conv, sp.n, 3, 1, 1, {}}, in, rng, prefix + "conv2."),
        r1_(LayerKind::Relu),
        r2_(LayerKind::Relu) {}

  Tensor forward(const Tensor& x, bool training) override {
    Tensor s = c2_.forward(r1_.forward(c1_.forward(x, training), training), training);
    for (std::size_t i = 0; i < s.size(); ++i) s.data[i] += x.data[i];
    return r2_.forward(s, training);
  }

  Tensor backward(const Tensor& g, bool param_grads) override {
    const Tensor gs = r2_.backward(g, param_grads);
    Tensor dx = c1_.backward(r1_.backward(c2_.backward(gs, param_grads), param_grads), param_grads);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += gs.data[i];
    return dx;
  }

  std::vector<Parameter*> params() override {
    auto p = c1_.params();
    for (Parameter* q : c2_.params()) p.push_back(q);
    return p;
  }

  void gates(std::vector<bool>& out) const override {
    r1_.gates(out);
    r2_.gates(out);
  }

 private:
  Conv c1_, c2_;
  Activation r1_, r2_;
};

class Reshape final : public Layer {
 public:
  explicit Reshape(Shape target) : target_(std::move(target)) {}

  Tensor forward(const Tensor& x, bool) override {
    in_ = x.shape;
    return Tensor(with_batch(x.batch(), target_), x.data);
  }
  Tensor backward(const Tensor& g, bool) override { return Tensor(in_, g.data); }

 private:
  Shape target_, in_;
};

}  // namespace

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& in, std::mt19937_64& rng,
                                  const std::string& prefix) {
  switch (spec.kind) {
    case LayerKind::Conv: return std::make_unique<Conv>(spec, in, rng, prefix + "conv.");
    case LayerKind::ConvTranspose: return std::make_unique<ConvTranspose>(spec, in, rng, prefix + "conv_t.");
    case LayerKind::Linear: return std::make_unique<Linear>(spec, in, rng, prefix + "fc.");
    case LayerKind::BatchNorm: return std::make_unique<BatchNorm>(in, prefix + "bn.");
    case LayerKind::Residual: return std::make_unique<Residual>(spec, in, rng, prefix + "res.");
    case LayerKind::Reshape: return std::make_unique<Reshape>(spec.shape);
    default: return std::make_unique<Activation>(spec.kind);
  }
}

}  // namespace gripgen::neural
