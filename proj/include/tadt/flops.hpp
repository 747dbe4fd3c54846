#pragma once

// Analytic FLOP counts for one sample.
//
// Convention: a multiply-accumulate in a matmul, linear, conv or attention
// product is 2 FLOPs. Every other tensor op (bias add, residual add,
// scaling, activation, layer norm, softmax, pooling, gating of ensemble
// predictions) costs 1 FLOP per scalar it produces, except reductions
// (mean, pooling) which cost 1 FLOP per scalar they read. Index arithmetic
// for window partitioning and coordinate lookups is not counted.

#include <cstdint>
#include <string>
#include <vector>

#include "tadt/backbone.hpp"
#include "tadt/config.hpp"

namespace tadt {

struct FlopCount {
  std::uint64_t matmul = 0;  // 2 x multiply-accumulates
  std::uint64_t other = 0;
  std::uint64_t total() const { return matmul + other; }
  FlopCount& operator+=(const FlopCount& o) {
    matmul += o.matmul;
    other += o.other;
    return *this;
  }
};

struct MstgFlops {
  FlopCount qkv;
  FlopCount attention;   // scores, softmax, weighted values, key/value reduction
  FlopCount projection;  // sliced projection and its residual
  FlopCount mlp;         // norm2, fc1, GELU, fc2, residual
  FlopCount norm;        // norm1 (skipped when no branch runs)
  FlopCount conv;        // group conv and the group residual
  FlopCount sum() const;
};

struct FlopsReport {
  std::size_t height = 0, width = 0;
  double scale = 1.0;
  std::size_t out_height = 0, out_width = 0;
  RoutingVector routing;

  FlopCount shallow;  // input centering + shallow conv
  std::vector<MstgFlops> groups;
  FlopCount body;     // body conv + long residual
  FlopCount head;
  FlopCount router;
  FlopCount upsampler;

  // Both totals include the routing controller; a network without one
  // costs static_all_on - router.total().
  std::uint64_t static_all_on = 0;
  std::uint64_t dynamic_for_r = 0;

  FlopCount backbone() const;
  // Every component for the given routing.
  FlopCount sum() const;
  std::uint64_t baseline_total() const { return static_all_on - router.total(); }
};

extern const char* const kFlopsConvention;

// Throws ContractError on a routing length mismatch, H or W of 0, or s < 1.
FlopsReport count_flops(const RunConfig& config, const RoutingVector& r, std::size_t height, std::size_t width,
                        double s);

// Runs the routing controller, the backbone under r and the full upsampler
// on a [1,3,H,W] input with MAC counting and returns 2 x MACs. Refuses
// (ConfigError) when the predicted matmul/conv FLOPs exceed max_flops.
std::uint64_t measure_flops(const RunConfig& config, const RoutingVector& r, std::size_t height, std::size_t width,
                            double s, std::uint64_t max_flops = 4'000'000'000ULL);

std::string flops_json(const FlopsReport& report);
std::string flops_text(const FlopsReport& report);

}  // namespace tadt
