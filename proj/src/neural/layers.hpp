#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "gripgen/neural.hpp"

namespace gripgen::neural {

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// `param_grads` false skips weight gradients (frozen network).
  virtual Tensor backward(const Tensor& g, bool param_grads) = 0;
  virtual std::vector<Parameter*> params() { return {}; }
  /// Appends the on/off state of every piecewise-linear unit from the last forward.
  virtual void gates(std::vector<bool>&) const {}
};

/// `in` is the per-sample input shape, already validated by the spec trace.
std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& in, std::mt19937_64& rng,
                                  const std::string& prefix);

}  // namespace gripgen::neural
