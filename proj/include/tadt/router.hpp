#pragma once

// Task-aware routing controller: maps an (LR image, scale) task to branch
// selection probabilities and samples a binary routing vector from them.

#include <string>

#include "tadt/backbone.hpp"
#include "tadt/config.hpp"
#include "tadt/nn.hpp"

namespace tadt {

enum class RoutingMode {
  sample,     // r ~ Bernoulli(p)
  threshold,  // r = 1 iff p >= eval threshold
  all_on,     // every branch active, router ignored
};

std::string to_string(RoutingMode mode);
// Accepts "sample", "threshold" and "all-on".
RoutingMode parse_routing_mode(const std::string& text);

template <typename T>
struct RouteDistribution {
  Tensor<T> logits;  // e [4N]
  Tensor<T> beta;    // [1], in (0,1)
  Tensor<T> probs;   // p [4N], in [0,1]
};

// p = min(beta * n * sigmoid(e) / sum(sigmoid(e)), 1) with n = e.numel().
// The normalizer is accumulated relative to the first entry so that
// constant logits give p == beta exactly.
template <typename T>
Tensor<T> modulate(const Tensor<T>& logits, const Tensor<T>& beta);

template <typename T>
struct SampledRoutes {
  RoutingVector bits;
  // [4N] tensor holding the same 0/1 values; its backward passes the
  // incoming gradient straight through to p.
  Tensor<T> gates;
};

template <typename T>
SampledRoutes<T> sample_routes(const Tensor<T>& probs, RoutingMode mode, Rng& rng, double threshold = 0.5);

// Scale fed to the scale branch: (s - 1) / 3, so s in [1,4] maps to [0,1].
double normalized_scale(double s);

template <typename T>
struct RoutingController {
  Conv2d<T> conv1;   // 3 -> c_r
  Conv2d<T> conv2;   // c_r -> c_r
  Linear<T> logits;  // c_r -> 4N
  Linear<T> scale1;  // 1 -> hs
  Linear<T> scale2;  // hs -> hs
  Linear<T> scale3;  // hs -> 1

  static RoutingController create(const BackboneConfig& backbone, const RouterConfig& config, Rng& rng);

  std::size_t routing_length() const { return logits.out_features(); }

  // image [B,3,H,W] -> e [B,4N]
  Tensor<T> image_branch(const Tensor<T>& image) const;
  // s >= 1 -> beta [1]
  Tensor<T> scale_branch(double s) const;
  // image [1,3,H,W]
  RouteDistribution<T> forward(const Tensor<T>& image, double s) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace tadt
