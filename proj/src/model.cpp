#include "tadt/model.hpp"

namespace tadt {

std::string to_string(Stage stage) { return stage == Stage::baseline ? "baseline" : "tadt"; }

Stage parse_stage(const std::string& text) {
  if (text == "baseline") return Stage::baseline;
  if (text == "tadt") return Stage::tadt;
  throw ConfigError("unknown stage '" + text + "' (expected baseline or tadt)");
}

template <typename T>
Network<T> Network<T>::create(const RunConfig& config, Stage stage, Rng& rng) {
  config.validate();
  Network net;
  net.config = config;
  net.backbone = Backbone<T>::create(config.backbone, rng);
  net.upsampler = Liif<T>::create(config.backbone.out_channels, config.upsampler, rng);
  if (stage == Stage::tadt) net.attach_router(rng);
  return net;
}

template <typename T>
void Network<T>::attach_router(Rng& rng) {
  router = RoutingController<T>::create(config.backbone, config.router, rng);
}

template <typename T>
ParamList<T> Network<T>::parameters() const {
  ParamList<T> out;
  backbone.collect(out, "backbone");
  upsampler.collect(out, "upsampler");
  if (router) router->collect(out, "router");
  return out;
}

template <typename T>
Routed<T> Network<T>::route(const Tensor<T>& lr, double s, RoutingMode mode, Rng& rng) const {
  Routed<T> routed;
  if (!router || mode == RoutingMode::all_on) {
    routed.bits = RoutingVector::all_on(config.backbone.groups);
    return routed;
  }
  routed.dist = router->forward(lr, s);
  SampledRoutes<T> sampled = sample_routes(routed.dist->probs, mode, rng, config.router.eval_threshold);
  routed.bits = sampled.bits;
  routed.gates = sampled.gates;
  return routed;
}

template <typename T>
Tensor<T> Network<T>::features(const Tensor<T>& lr, const Routed<T>& routed) const {
  return backbone.forward(lr, routed.bits, routed.gates);
}

template <typename T>
Tensor<T> Network<T>::super_resolve(const Tensor<T>& lr, double s, RoutingMode mode, Rng& rng,
                                    std::vector<Routed<T>>* routes) const {
  if (lr.rank() != 4 || lr.dim(1) != 3) throw DimensionError("expected [B,3,h,w], got " + shape_to_string(lr.shape()));
  NoGradGuard guard;
  const std::size_t b = lr.dim(0);
  std::vector<Tensor<T>> outs;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor<T> one = b == 1 ? lr : slice(lr, 0, i, 1);
    Routed<T> r = route(one, s, mode, rng);
    outs.push_back(upsampler.full_upsample(features(one, r), s));
    if (routes) routes->push_back(std::move(r));
  }
  return b == 1 ? outs[0] : concat(outs, 0);
}

template struct Network<float>;
template struct Network<double>;

}  // namespace tadt
