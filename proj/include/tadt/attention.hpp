#pragma once

// Window partitioning and the two self-attention branch kinds of a
// multi-scale transformer block: local attention inside m_j x m_j windows,
// and global attention inside m x m windows whose keys and values are
// reduced to d x d tokens.

#include <cstddef>
#include <string>

#include "tadt/config.hpp"
#include "tadt/nn.hpp"

namespace tadt {

struct WindowLayout {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 0;
  std::size_t padded_height = 0;
  std::size_t padded_width = 0;

  std::size_t windows_per_image() const { return (padded_height / window) * (padded_width / window); }
  std::size_t window_count() const { return batch * windows_per_image(); }
  std::size_t tokens_per_window() const { return window * window; }
};

WindowLayout make_window_layout(std::size_t batch, std::size_t height, std::size_t width, std::size_t window);

template <typename T>
struct Partitioned {
  Tensor<T> windows;  // [B * n_w, m*m, c]
  WindowLayout layout;
};

// x [B,H,W,c]: zero-pads H and W up to multiples of m and tiles into
// non-overlapping windows flattened to token sequences.
template <typename T>
Partitioned<T> window_partition(const Tensor<T>& x, std::size_t window);

// Inverse of window_partition, including the crop of the padding.
template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, const WindowLayout& layout);

template <typename T>
struct AttentionOutput {
  Tensor<T> output;   // [G, n, c]
  Tensor<T> weights;  // [G, h, n, n_k]
};

// Per head: softmax(Q K^T / sqrt(d_head)) V, heads concatenated along the
// channel axis. q [G,n,c], k and v [G,n_k,c]. logit_bias, when defined, is
// [h, n, n_k] and is added to the scaled logits.
template <typename T>
AttentionOutput<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        std::size_t heads, const Tensor<T>& logit_bias = {});

// Reduces window tokens [G, m*m, c] to [G, d*d, c] by pooling over the
// spatial m x m layout, or by a fixed [d*d, m*m] projection.
template <typename T>
Tensor<T> reduce_window_tokens(const Tensor<T>& windows, std::size_t window, std::size_t pool_size,
                               GsaReduction reduction, const Tensor<T>& projection = {});

enum class BranchKind { local, global };

template <typename T>
struct AttentionBranch {
  BranchKind kind = BranchKind::local;
  std::size_t window = 0;
  std::size_t heads = 1;
  std::size_t pool_size = 0;  // global only
  GsaReduction reduction = GsaReduction::max_pool;
  Linear<T> qkv;                // c -> 3c, no bias
  Tensor<T> relative_bias;      // [(2m-1)^2, heads]; local branches with the toggle on
  Tensor<T> reduction_matrix;   // [d*d, m*m]; fixed, random_matrix reduction only

  static AttentionBranch make_local(std::size_t channels, std::size_t window, std::size_t heads,
                                    bool relative_bias, Rng& rng);
  static AttentionBranch make_global(std::size_t channels, std::size_t window, std::size_t pool_size,
                                     std::size_t heads, GsaReduction reduction, Rng& rng);

  std::size_t channels() const { return qkv.in_features(); }

  // f [B,H,W,c] -> [B,H,W,c]
  Tensor<T> forward(const Tensor<T>& f) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
Tensor<T> lsa_forward(const Tensor<T>& f, const AttentionBranch<T>& params);

template <typename T>
Tensor<T> gsa_forward(const Tensor<T>& f, const AttentionBranch<T>& params);

// [h, m*m, m*m] bias gathered from a [(2m-1)^2, h] relative-position table.
template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t window, std::size_t heads);

}  // namespace tadt
