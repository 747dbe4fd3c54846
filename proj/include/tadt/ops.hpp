#pragma once

// Differentiable tensor operations. Every function here records a backward
// closure when any input requires grad and grad mode is enabled.
//
// Binary elementwise ops broadcast one operand when it is a scalar or its
// shape is a trailing suffix of the other operand's shape (e.g. a [C] bias
// against [B,H,W,C]).

#include <cstdint>
#include <utility>
#include <vector>

#include "tadt/tensor.hpp"

namespace tadt {

// [..,p,q] x [..,q,r] -> [..,p,r]; batch extents agree or one side has a
// single batch (rank-2 operands broadcast over the other's batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a x b^T: [..,p,q] x [..,r,q] -> [..,p,r].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

// x * c for a constant c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> abs(const Tensor<T>& x);
// min(x, c); gradient is zero where the clamp is active.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T c);

// Full reductions to a rank-0 scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// [B,C,H,W] -> [B,C], mean over the spatial extents.
template <typename T>
Tensor<T> mean_hw(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Normalizes over the last axis, then applies gain and bias of extent C.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// Stride-1 cross-correlation. x [B,Cin,H,W], w [Cout,Cin,k,k] with k odd,
// optional bias [Cout] (pass an undefined tensor for none).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t padding);

enum class PoolKind { max, avg };

// x [B,C,H,W]; max ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::size_t window, std::size_t stride);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes,
                             std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

// Zero padding, one (before, after) pair per axis.
template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::pair<std::size_t, std::size_t>>& padding);
template <typename T>
Tensor<T> crop(const Tensor<T>& x, const std::vector<std::size_t>& offsets, Shape extents);

// out.flat[i] = x.flat[index[i]], or zero where index[i] < 0. Backward
// scatter-adds, so repeated indices accumulate.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::int64_t> index);

}  // namespace tadt
