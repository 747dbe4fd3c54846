#include "tadt/router.hpp"

namespace tadt {

std::string to_string(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::sample: return "sample";
    case RoutingMode::threshold: return "threshold";
    case RoutingMode::all_on: return "all-on";
  }
  return "threshold";
}

RoutingMode parse_routing_mode(const std::string& text) {
  if (text == "sample") return RoutingMode::sample;
  if (text == "threshold") return RoutingMode::threshold;
  if (text == "all-on" || text == "all_on") return RoutingMode::all_on;
  throw ConfigError("unknown routing mode '" + text + "' (expected sample, threshold or all-on)");
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& logits, const Tensor<T>& beta) {
  if (logits.rank() != 1 || logits.numel() == 0) {
    throw DimensionError("modulate expects a non-empty [4N] logit vector, got " + shape_to_string(logits.shape()));
  }
  if (beta.numel() != 1) throw DimensionError("beta must be a single value, got " + shape_to_string(beta.shape()));
  const T n = static_cast<T>(logits.numel());
  Tensor<T> sig = sigmoid(logits);
  Tensor<T> ref = slice(sig, 0, 0, 1);
  // n*ref + sum(sig - ref) == sum(sig), with the uniform case exact.
  Tensor<T> denom = add(scale(ref, n), reshape(sum(sub(sig, ref)), {1}));
  Tensor<T> ratio = div(scale(sig, n), denom);
  return clamp_max(mul(ratio, reshape(beta, {1})), T(1));
}

template <typename T>
SampledRoutes<T> sample_routes(const Tensor<T>& probs, RoutingMode mode, Rng& rng, double threshold) {
  if (probs.rank() != 1 || probs.numel() % 4 != 0) {
    throw DimensionError("routing probabilities must be [4N], got " + shape_to_string(probs.shape()));
  }
  const auto p = probs.data();
  std::vector<int> bits(p.size());
  std::vector<T> values(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= T(0) && p[i] <= T(1))) {
      throw ContractError("routing probability " + std::to_string(i) + " = " + std::to_string(p[i]) +
                          " lies outside [0,1]");
    }
    switch (mode) {
      case RoutingMode::sample: bits[i] = rng.bernoulli(static_cast<double>(p[i])) ? 1 : 0; break;
      case RoutingMode::threshold: bits[i] = static_cast<double>(p[i]) >= threshold ? 1 : 0; break;
      case RoutingMode::all_on: bits[i] = 1; break;
    }
    values[i] = static_cast<T>(bits[i]);
  }
  Tensor<T> gates = Tensor<T>::make_op(probs.shape(), std::move(values), "ste", {probs},
                                       [probs](const std::vector<T>& g) {
                                         auto& gp = probs.grad_buffer();
                                         for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
                                       });
  return {RoutingVector(bits), gates};
}

double normalized_scale(double s) { return (s - 1.0) / 3.0; }

template <typename T>
RoutingController<T> RoutingController<T>::create(const BackboneConfig& backbone, const RouterConfig& config,
                                                  Rng& rng) {
  config.validate();
  const std::size_t cr = config.hidden, hs = config.scale_hidden;
  RoutingController rc;
  rc.conv1 = Conv2d<T>::create(3, cr, 3, rng);
  rc.conv2 = Conv2d<T>::create(cr, cr, 3, rng);
  rc.logits = Linear<T>::create(cr, backbone.routing_length(), true, LinearInit::fan_in_uniform, rng);
  rc.scale1 = Linear<T>::create(1, hs, true, LinearInit::fan_in_uniform, rng);
  rc.scale2 = Linear<T>::create(hs, hs, true, LinearInit::fan_in_uniform, rng);
  rc.scale3 = Linear<T>::create(hs, 1, true, LinearInit::fan_in_uniform, rng);
  return rc;
}

template <typename T>
Tensor<T> RoutingController<T>::image_branch(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw DimensionError("routing controller expects [B,3,H,W], got " + shape_to_string(image.shape()));
  }
  Tensor<T> h = gelu(conv1(image));
  h = gelu(conv2(h));
  return logits(mean_hw(h));
}

template <typename T>
Tensor<T> RoutingController<T>::scale_branch(double s) const {
  if (!(s >= 1.0)) throw ContractError("scale must be >= 1, got " + std::to_string(s));
  Tensor<T> x({1, 1}, {static_cast<T>(normalized_scale(s))});
  Tensor<T> h = gelu(scale1(x));
  h = gelu(scale2(h));
  return reshape(sigmoid(scale3(h)), {1});
}

template <typename T>
RouteDistribution<T> RoutingController<T>::forward(const Tensor<T>& image, double s) const {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw DimensionError("routing is computed per sample; expected [1,3,H,W], got " + shape_to_string(image.shape()));
  }
  RouteDistribution<T> d;
  d.logits = reshape(image_branch(image), {routing_length()});
  d.beta = scale_branch(s);
  d.probs = modulate(d.logits, d.beta);
  return d;
}

template <typename T>
void RoutingController<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
  logits.collect(out, prefix + ".logits");
  scale1.collect(out, prefix + ".scale1");
  scale2.collect(out, prefix + ".scale2");
  scale3.collect(out, prefix + ".scale3");
}

#define TADT_INSTANTIATE_ROUTER(T)                                                                         \
  template Tensor<T> modulate(const Tensor<T>&, const Tensor<T>&);                                        \
  template SampledRoutes<T> sample_routes(const Tensor<T>&, RoutingMode, Rng&, double);                   \
  template struct RoutingController<T>;

TADT_INSTANTIATE_ROUTER(float)
TADT_INSTANTIATE_ROUTER(double)

#undef TADT_INSTANTIATE_ROUTER

}  // namespace tadt
