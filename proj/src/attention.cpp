#include "tadt/attention.hpp"

#include <cmath>

namespace tadt {

WindowLayout make_window_layout(std::size_t batch, std::size_t height, std::size_t width, std::size_t window) {
  if (window == 0) throw ContractError("window size must be positive");
  WindowLayout layout;
  layout.batch = batch;
  layout.height = height;
  layout.width = width;
  layout.window = window;
  layout.padded_height = (height + window - 1) / window * window;
  layout.padded_width = (width + window - 1) / window * window;
  return layout;
}

template <typename T>
Partitioned<T> window_partition(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 4) throw DimensionError("window_partition expects [B,H,W,c], got " + shape_to_string(x.shape()));
  const std::size_t c = x.dim(3);
  const WindowLayout layout = make_window_layout(x.dim(0), x.dim(1), x.dim(2), window);
  const std::size_t m = window;
  const std::size_t wy_count = layout.padded_height / m;
  const std::size_t wx_count = layout.padded_width / m;
  const std::size_t tokens = m * m;
  std::vector<std::int64_t> index(layout.window_count() * tokens * c);
  std::size_t o = 0;
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t wy = 0; wy < wy_count; ++wy) {
      for (std::size_t wx = 0; wx < wx_count; ++wx) {
        for (std::size_t ty = 0; ty < m; ++ty) {
          const std::size_t y = wy * m + ty;
          for (std::size_t tx = 0; tx < m; ++tx) {
            const std::size_t xx = wx * m + tx;
            const bool inside = y < layout.height && xx < layout.width;
            const std::int64_t base =
                inside ? static_cast<std::int64_t>(((b * layout.height + y) * layout.width + xx) * c) : -1;
            for (std::size_t ch = 0; ch < c; ++ch) index[o++] = inside ? base + static_cast<std::int64_t>(ch) : -1;
          }
        }
      }
    }
  }
  return {gather(x, {layout.window_count(), tokens, c}, std::move(index)), layout};
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, const WindowLayout& layout) {
  const std::size_t m = layout.window;
  if (windows.rank() != 3 || windows.dim(0) != layout.window_count() || windows.dim(1) != m * m) {
    throw DimensionError("window_merge: windows " + shape_to_string(windows.shape()) +
                         " inconsistent with layout of " + std::to_string(layout.window_count()) + " windows of " +
                         std::to_string(m * m) + " tokens");
  }
  const std::size_t c = windows.dim(2);
  const std::size_t wx_count = layout.padded_width / m;
  const std::size_t per_image = layout.windows_per_image();
  std::vector<std::int64_t> index(layout.batch * layout.height * layout.width * c);
  std::size_t o = 0;
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t y = 0; y < layout.height; ++y) {
      for (std::size_t xx = 0; xx < layout.width; ++xx) {
        const std::size_t w = b * per_image + (y / m) * wx_count + xx / m;
        const std::size_t t = (y % m) * m + xx % m;
        const auto base = static_cast<std::int64_t>((w * m * m + t) * c);
        for (std::size_t ch = 0; ch < c; ++ch) index[o++] = base + static_cast<std::int64_t>(ch);
      }
    }
  }
  return gather(windows, {layout.batch, layout.height, layout.width, c}, std::move(index));
}

template <typename T>
AttentionOutput<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        std::size_t heads, const Tensor<T>& logit_bias) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("attention expects rank-3 token tensors, got " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  const std::size_t g = q.dim(0), n = q.dim(1), c = q.dim(2);
  const std::size_t nk = k.dim(1);
  if (k.dim(0) != g || v.dim(0) != g || k.dim(2) != c || v.dim(2) != c || v.dim(1) != nk) {
    throw DimensionError("attention: incompatible Q " + shape_to_string(q.shape()) + ", K " +
                         shape_to_string(k.shape()) + ", V " + shape_to_string(v.shape()));
  }
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t dh = c / heads;
  auto split_heads = [&](const Tensor<T>& t, std::size_t tokens) {
    Tensor<T> r = reshape(t, {g, tokens, heads, dh});
    return heads == 1 ? reshape(r, {g, 1, tokens, dh}) : permute(r, {0, 2, 1, 3});
  };
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> qh = split_heads(scale(q, inv_sqrt), n);
  Tensor<T> kh = split_heads(k, nk);
  Tensor<T> vh = split_heads(v, nk);
  Tensor<T> logits = matmul_nt(qh, kh);  // [G,h,n,nk]
  if (logit_bias.defined()) logits = add(logits, logit_bias);
  Tensor<T> weights = softmax(logits, 3);
  Tensor<T> out = matmul(weights, vh);  // [G,h,n,dh]
  out = heads == 1 ? reshape(out, {g, n, c}) : reshape(permute(out, {0, 2, 1, 3}), {g, n, c});
  return {out, weights};
}

template <typename T>
Tensor<T> reduce_window_tokens(const Tensor<T>& windows, std::size_t window, std::size_t pool_size,
                               GsaReduction reduction, const Tensor<T>& projection) {
  const std::size_t g = windows.dim(0), c = windows.dim(2);
  const std::size_t m = window, d = pool_size;
  if (windows.dim(1) != m * m) {
    throw DimensionError("reduce_window_tokens: expected " + std::to_string(m * m) + " tokens, got " +
                         shape_to_string(windows.shape()));
  }
  if (d == 0 || d > m || m % d != 0) {
    throw ConfigError("pool size " + std::to_string(d) + " must divide window " + std::to_string(m));
  }
  if (reduction == GsaReduction::random_matrix) {
    if (!projection.defined() || projection.shape() != Shape{d * d, m * m}) {
      throw DimensionError("random-matrix reduction needs a [d*d, m*m] projection");
    }
    return matmul(projection, windows);
  }
  const std::size_t stride = m / d;
  Tensor<T> spatial = permute(reshape(windows, {g, m, m, c}), {0, 3, 1, 2});
  Tensor<T> pooled = pool2d(spatial, reduction == GsaReduction::max_pool ? PoolKind::max : PoolKind::avg, stride, stride);
  return reshape(permute(pooled, {0, 2, 3, 1}), {g, d * d, c});
}

template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t window, std::size_t heads) {
  const std::size_t m = window;
  const std::size_t span = 2 * m - 1;
  if (table.shape() != Shape{span * span, heads}) {
    throw DimensionError("relative bias table " + shape_to_string(table.shape()) + " does not match window " +
                         std::to_string(m) + " and " + std::to_string(heads) + " heads");
  }
  const std::size_t n = m * m;
  std::vector<std::int64_t> index(heads * n * n);
  std::size_t o = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t dy = i / m + m - 1 - j / m;
        const std::size_t dx = i % m + m - 1 - j % m;
        index[o++] = static_cast<std::int64_t>((dy * span + dx) * heads + h);
      }
    }
  }
  return gather(table, {heads, n, n}, std::move(index));
}

template <typename T>
AttentionBranch<T> AttentionBranch<T>::make_local(std::size_t channels, std::size_t window, std::size_t heads,
                                                  bool relative_bias, Rng& rng) {
  AttentionBranch b;
  b.kind = BranchKind::local;
  b.window = window;
  b.heads = heads;
  b.qkv = Linear<T>::create(channels, 3 * channels, false, LinearInit::trunc_normal, rng);
  if (relative_bias) {
    const std::size_t span = 2 * window - 1;
    b.relative_bias = init::trunc_normal<T>({span * span, heads}, 0.02, rng);
  }
  return b;
}

template <typename T>
AttentionBranch<T> AttentionBranch<T>::make_global(std::size_t channels, std::size_t window, std::size_t pool_size,
                                                   std::size_t heads, GsaReduction reduction, Rng& rng) {
  if (pool_size == 0 || pool_size > window || window % pool_size != 0) {
    throw ConfigError("GSA pool size " + std::to_string(pool_size) + " must divide window " + std::to_string(window));
  }
  AttentionBranch b;
  b.kind = BranchKind::global;
  b.window = window;
  b.heads = heads;
  b.pool_size = pool_size;
  b.reduction = reduction;
  b.qkv = Linear<T>::create(channels, 3 * channels, false, LinearInit::trunc_normal, rng);
  if (reduction == GsaReduction::random_matrix) {
    const std::size_t rows = pool_size * pool_size, cols = window * window;
    std::vector<T> data(rows * cols);
    const double stddev = 1.0 / static_cast<double>(window);
    for (auto& val : data) val = static_cast<T>(rng.normal() * stddev);
    b.reduction_matrix = Tensor<T>({rows, cols}, std::move(data), false);
  }
  return b;
}

template <typename T>
Tensor<T> lsa_forward(const Tensor<T>& f, const AttentionBranch<T>& params) {
  const std::size_t c = params.channels();
  if (f.rank() != 4 || f.dim(3) != c) {
    throw DimensionError("attention branch expects [B,H,W," + std::to_string(c) + "], got " +
                         shape_to_string(f.shape()));
  }
  Partitioned<T> part = window_partition(params.qkv(f), params.window);
  auto qkv = split(part.windows, {c, c, c}, 2);
  Tensor<T> bias;
  if (params.relative_bias.defined()) bias = relative_position_bias(params.relative_bias, params.window, params.heads);
  AttentionOutput<T> attn = scaled_dot_attention(qkv[0], qkv[1], qkv[2], params.heads, bias);
  return window_merge(attn.output, part.layout);
}

template <typename T>
Tensor<T> gsa_forward(const Tensor<T>& f, const AttentionBranch<T>& params) {
  const std::size_t c = params.channels();
  if (f.rank() != 4 || f.dim(3) != c) {
    throw DimensionError("attention branch expects [B,H,W," + std::to_string(c) + "], got " +
                         shape_to_string(f.shape()));
  }
  Partitioned<T> part = window_partition(params.qkv(f), params.window);
  auto qkv = split(part.windows, {c, c, c}, 2);
  Tensor<T> k = reduce_window_tokens(qkv[1], params.window, params.pool_size, params.reduction, params.reduction_matrix);
  Tensor<T> v = reduce_window_tokens(qkv[2], params.window, params.pool_size, params.reduction, params.reduction_matrix);
  AttentionOutput<T> attn = scaled_dot_attention(qkv[0], k, v, params.heads);
  return window_merge(attn.output, part.layout);
}

template <typename T>
Tensor<T> AttentionBranch<T>::forward(const Tensor<T>& f) const {
  return kind == BranchKind::local ? lsa_forward(f, *this) : gsa_forward(f, *this);
}

template <typename T>
void AttentionBranch<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  qkv.collect(out, prefix + ".qkv");
  if (relative_bias.defined()) out.push_back({prefix + ".relative_bias", relative_bias});
  if (reduction_matrix.defined()) out.push_back({prefix + ".reduction_matrix", reduction_matrix});
}

#define TADT_INSTANTIATE_ATTENTION(T)                                                                            \
  template Partitioned<T> window_partition(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> window_merge(const Tensor<T>&, const WindowLayout&);                                       \
  template AttentionOutput<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                                   std::size_t, const Tensor<T>&);                              \
  template Tensor<T> reduce_window_tokens(const Tensor<T>&, std::size_t, std::size_t, GsaReduction,             \
                                          const Tensor<T>&);                                                    \
  template Tensor<T> relative_position_bias(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> lsa_forward(const Tensor<T>&, const AttentionBranch<T>&);                                  \
  template Tensor<T> gsa_forward(const Tensor<T>&, const AttentionBranch<T>&);                                  \
  template struct AttentionBranch<T>;

TADT_INSTANTIATE_ATTENTION(float)
TADT_INSTANTIATE_ATTENTION(double)

#undef TADT_INSTANTIATE_ATTENTION

}  // namespace tadt
