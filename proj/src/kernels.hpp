#pragma once

// Internal dense kernels shared by matmul and conv2d.

#include <algorithm>
#include <cstddef>
#include <cstring>

namespace tadt::kernels {

namespace detail {

template <typename T>
struct Vec {
  // 32-byte lanes; lowered to pairs of 16-byte registers without AVX.
  typedef T type __attribute__((vector_size(32)));
  static constexpr std::size_t lanes = 32 / sizeof(T);
};

// MR x (NV * lanes) tile of c held in registers while k is swept in order.
template <typename T, std::size_t MR, std::size_t NV>
inline void tile(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t k,
                 bool accumulate) {
  using V = typename Vec<T>::type;
  constexpr std::size_t L = Vec<T>::lanes;
  V acc[MR][NV];
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      if (accumulate) {
        std::memcpy(&acc[r][v], c + r * ldc + v * L, sizeof(V));
      } else {
        acc[r][v] = V{};
      }
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    V bv[NV];
    for (std::size_t v = 0; v < NV; ++v) std::memcpy(&bv[v], b + p * ldb + v * L, sizeof(V));
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) std::memcpy(c + r * ldc + v * L, &acc[r][v], sizeof(V));
  }
}

template <typename T>
inline void edge(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t rows,
                 std::size_t cols, std::size_t k, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      T acc = accumulate ? c[r * ldc + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * ldb + j];
      c[r * ldc + j] = acc;
    }
  }
}

}  // namespace detail

// c[m,n] (+)= a[m,k] * b[k,n]. Each c[i,j] accumulates its k products in
// order starting from 0 (or the existing value), so results do not depend
// on m, n or the tiling.
template <typename T, std::size_t MR>
inline void row_block(const T* a, const T* b, T* c, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t L = detail::Vec<T>::lanes;
  std::size_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) detail::tile<T, MR, 2>(a, k, b + j, n, c + j, n, k, accumulate);
  for (; j + L <= n; j += L) detail::tile<T, MR, 1>(a, k, b + j, n, c + j, n, k, accumulate);
  if (j < n) detail::edge(a, k, b + j, n, c + j, n, MR, n - j, k, accumulate);
}

// c[m,n] (+)= a[m,k] * b[k,n]. Each c[i,j] accumulates its k products in
// order starting from 0 (or the existing value), so results do not depend
// on m, n or the tiling.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  constexpr std::size_t MR = 4;
  std::size_t i = 0;
  for (; i + MR <= m; i += MR) row_block<T, MR>(a + i * k, b, c + i * n, k, n, accumulate);
  for (; i < m; ++i) row_block<T, 1>(a + i * k, b, c + i * n, k, n, accumulate);
}

// out[cols,rows] = in[rows,cols]^T
template <typename T>
void transpose(const T* in, T* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t ib = 0; ib < rows; ib += kTile) {
    const std::size_t ie = std::min(rows, ib + kTile);
    for (std::size_t jb = 0; jb < cols; jb += kTile) {
      const std::size_t je = std::min(cols, jb + kTile);
      for (std::size_t i = ib; i < ie; ++i) {
        for (std::size_t j = jb; j < je; ++j) out[j * rows + i] = in[i * cols + j];
      }
    }
  }
}

}  // namespace tadt::kernels
