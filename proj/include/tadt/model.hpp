#pragma once

// Backbone + optional routing controller + upsampler.

#include <optional>
#include <string>

#include "tadt/backbone.hpp"
#include "tadt/router.hpp"
#include "tadt/upsampler.hpp"

namespace tadt {

enum class Stage { baseline, tadt };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

template <typename T>
struct Routed {
  RoutingVector bits;
  Tensor<T> gates;                           // undefined without a router or in all-on mode
  std::optional<RouteDistribution<T>> dist;  // present when the router ran
};

template <typename T>
struct Network {
  RunConfig config;
  Backbone<T> backbone;
  Liif<T> upsampler;
  std::optional<RoutingController<T>> router;  // tadt stage only

  // Parameters are drawn in the order backbone, upsampler, router.
  static Network create(const RunConfig& config, Stage stage, Rng& rng);

  Stage stage() const { return router ? Stage::tadt : Stage::baseline; }
  // Turns a baseline network into a tadt one by adding a fresh controller.
  void attach_router(Rng& rng);

  ParamList<T> parameters() const;

  // lr [1,3,h,w]. Without a router, or in all-on mode, every branch is on.
  Routed<T> route(const Tensor<T>& lr, double s, RoutingMode mode, Rng& rng) const;

  // lr [1,3,h,w] -> feature [1,C_out,h,w]
  Tensor<T> features(const Tensor<T>& lr, const Routed<T>& routed) const;

  // Full-image inference, one sample at a time: lr [B,3,h,w] ->
  // [B,3,round(h s),round(w s)]. routes, when given, receives each sample's
  // routing.
  Tensor<T> super_resolve(const Tensor<T>& lr, double s, RoutingMode mode, Rng& rng,
                          std::vector<Routed<T>>* routes = nullptr) const;
};

}  // namespace tadt
