#pragma once

// Parameterized layers shared by the backbone, router and upsampler.

#include <cmath>
#include <string>
#include <vector>

#include "tadt/errors.hpp"
#include "tadt/ops.hpp"
#include "tadt/rng.hpp"

namespace tadt {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Trainable scalars only; fixed buffers (requires_grad off) are skipped.
template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  }
  return n;
}

namespace init {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

}  // namespace init

enum class LinearInit { trunc_normal, fan_in_uniform };

// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer has no bias

  static Linear create(std::size_t in, std::size_t out, bool with_bias, LinearInit scheme, Rng& rng) {
    Linear layer;
    if (scheme == LinearInit::trunc_normal) {
      layer.weight = init::trunc_normal<T>({in, out}, 0.02, rng);
      if (with_bias) layer.bias = Tensor<T>::zeros({out}, true);
    } else {
      layer.weight = init::fan_in_uniform<T>({in, out}, in, rng);
      if (with_bias) layer.bias = init::fan_in_uniform<T>({out}, in, rng);
    }
    return layer;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  // x [..., in] -> [..., out]
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t in = in_features();
    if (x.rank() == 0 || x.dim(x.rank() - 1) != in) {
      throw DimensionError("linear: input " + shape_to_string(x.shape()) + " does not end in " + std::to_string(in));
    }
    Shape out_shape = x.shape();
    out_shape.back() = out_features();
    Tensor<T> rows = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
    Tensor<T> y = matmul(rows, weight);
    if (bias.defined()) y = add(y, bias);
    return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

// Same-padding square convolution.
template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]

  static Conv2d create(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
    Conv2d conv;
    const std::size_t fan_in = in * k * k;
    conv.weight = init::fan_in_uniform<T>({out, in, k, k}, fan_in, rng);
    conv.bias = init::fan_in_uniform<T>({out}, fan_in, rng);
    return conv;
  }

  std::size_t kernel() const { return weight.dim(2); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, kernel() / 2); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm create(std::size_t c) {
    return {Tensor<T>::full({c}, T(1), true), Tensor<T>::zeros({c}, true)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace tadt
