#pragma once

// Multi-scale transformer blocks (MSTB), groups (MSTG) and the full
// feature-extraction backbone with routing-gated branch execution.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tadt/attention.hpp"
#include "tadt/config.hpp"
#include "tadt/nn.hpp"

namespace tadt {

// Binary branch-selection vector of length 4N; entries 4i..4i+3 belong to
// MSTG i and are shared by both of its blocks.
class RoutingVector {
 public:
  RoutingVector() = default;
  // Throws ContractError unless every value is 0 or 1 and the length is a
  // multiple of 4.
  explicit RoutingVector(const std::vector<int>& bits);

  static RoutingVector all_on(std::size_t groups);
  static RoutingVector all_off(std::size_t groups);
  // Parses "1010 1111" style text; whitespace and commas are ignored.
  static RoutingVector parse(const std::string& text);

  std::size_t size() const { return bits_.size(); }
  std::size_t groups() const { return bits_.size() / 4; }
  bool active(std::size_t group, std::size_t branch) const { return bits_.at(4 * group + branch) != 0; }
  std::array<bool, 4> group(std::size_t i) const;
  std::size_t active_count() const;
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::string to_string() const;

  bool operator==(const RoutingVector& other) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

enum class ExecMode {
  sliced,           // gated-off branches are skipped and the projection is sliced
  dense_reference,  // every branch runs; gated-off outputs are zeroed before a full projection
};

// Sum over active j of O_j W_j, evaluated as one product of the active
// blocks against the matching row blocks of W. blocks[j] is [..., C/4] and
// must be defined exactly where r[j] is set. Returns an undefined tensor
// when no branch is active.
template <typename T>
Tensor<T> sliceable_projection(const std::array<Tensor<T>, 4>& blocks, const Tensor<T>& weight,
                               const std::array<bool, 4>& r);

template <typename T>
struct Mstb {
  LayerNorm<T> norm1;
  std::vector<AttentionBranch<T>> branches;  // 3 local + optional global
  Tensor<T> projection;                      // [C, C], no bias
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Linear<T> fc2;

  static Mstb create(const BackboneConfig& config, Rng& rng);

  bool has_branch(std::size_t j) const { return j < branches.size(); }

  // f [B,H,W,C]. gates, when defined, is the [4] slice of the
  // differentiable routing tensor; active branch outputs are multiplied by
  // it so gradients reach the router.
  Tensor<T> forward(const Tensor<T>& f, const std::array<bool, 4>& r, const Tensor<T>& gates = {},
                    ExecMode mode = ExecMode::sliced) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Mstg {
  std::array<Mstb<T>, 2> blocks;
  Conv2d<T> conv;

  static Mstg create(const BackboneConfig& config, Rng& rng);

  // f [B,H,W,C] -> [B,H,W,C]; both blocks see the same r.
  Tensor<T> forward(const Tensor<T>& f, const std::array<bool, 4>& r, const Tensor<T>& gates = {},
                    ExecMode mode = ExecMode::sliced) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Backbone {
  BackboneConfig config;
  Conv2d<T> shallow;
  std::vector<Mstg<T>> groups;
  Conv2d<T> body;
  Conv2d<T> head;

  static Backbone create(const BackboneConfig& config, Rng& rng);

  // image [B,3,H,W] in [0,1] -> feature [B,C_out,H,W]. gates, when defined,
  // is the [4N] differentiable routing tensor matching r.
  Tensor<T> forward(const Tensor<T>& image, const RoutingVector& r, const Tensor<T>& gates = {},
                    ExecMode mode = ExecMode::sliced) const;

  // Plain forward with every branch active and no routing machinery.
  Tensor<T> forward_baseline(const Tensor<T>& image) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

// Trainable scalars of the backbone for a config, from the closed form.
std::size_t param_count(const BackboneConfig& config);

}  // namespace tadt
