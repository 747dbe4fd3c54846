#include "tadt/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "kernels.hpp"
#include "tadt/errors.hpp"

namespace tadt {

namespace {

template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool tracks(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

Shape batch_shape(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const char* name = transpose_b ? "matmul_nt" : "matmul";
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError(std::string(name) + ": operands must have rank >= 2, got " +
                         shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  const std::size_t p = a.dim(a.rank() - 2);
  const std::size_t q = a.dim(a.rank() - 1);
  const std::size_t bq = transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::size_t r = transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (q != bq) {
    throw DimensionError(std::string(name) + ": inner extents differ for " +
                         shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  const Shape ba = batch_shape(a.shape());
  const Shape bb = batch_shape(b.shape());
  const std::size_t na = shape_numel(ba);
  const std::size_t nb = shape_numel(bb);
  Shape out_shape;
  std::size_t batch = 0;
  if (ba == bb) {
    out_shape = ba;
    batch = na;
  } else if (na == 1) {
    out_shape = bb;
    batch = nb;
  } else if (nb == 1) {
    out_shape = ba;
    batch = na;
  } else {
    throw DimensionError(std::string(name) + ": batch extents do not broadcast for " +
                         shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  out_shape.push_back(p);
  out_shape.push_back(r);
  const bool a_bcast = (na == 1 && batch > 1);
  const bool b_bcast = (nb == 1 && batch > 1);

  std::vector<T> out(batch * p * r);
  std::vector<T> bt;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t g = 0; g < batch; ++g) {
    const T* ag = ad.data() + (a_bcast ? 0 : g) * p * q;
    const T* bg = bd.data() + (b_bcast ? 0 : g) * q * r;
    if (transpose_b) {
      if (g == 0 || !b_bcast) {
        bt.resize(q * r);
        kernels::transpose(bg, bt.data(), r, q);
      }
      bg = bt.data();
    }
    kernels::gemm(ag, bg, out.data() + g * p * r, p, q, r, false);
  }
  MacCounter::add(static_cast<std::uint64_t>(batch) * p * q * r);

  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), name, {a, b},
      [a, b, p, q, r, batch, a_bcast, b_bcast, transpose_b](const std::vector<T>& gout) {
        const auto ad = a.data();
        const auto bd = b.data();
        std::vector<T> tmp;
        for (std::size_t g = 0; g < batch; ++g) {
          const T* gg = gout.data() + g * p * r;
          const T* ag = ad.data() + (a_bcast ? 0 : g) * p * q;
          const T* bg = bd.data() + (b_bcast ? 0 : g) * q * r;
          if (tracks(a)) {
            T* ga = a.grad_buffer().data() + (a_bcast ? 0 : g) * p * q;
            if (transpose_b) {
              // b stored [r,q]: dA = G[p,r] * B[r,q]
              kernels::gemm(gg, bg, ga, p, r, q, true);
            } else {
              tmp.resize(q * r);
              kernels::transpose(bg, tmp.data(), q, r);
              kernels::gemm(gg, tmp.data(), ga, p, r, q, true);
            }
          }
          if (tracks(b)) {
            T* gb = b.grad_buffer().data() + (b_bcast ? 0 : g) * q * r;
            if (transpose_b) {
              // dB[r,q] = G^T[r,p] * A[p,q]
              tmp.resize(p * r);
              kernels::transpose(gg, tmp.data(), p, r);
              kernels::gemm(tmp.data(), ag, gb, r, p, q, true);
            } else {
              // dB[q,r] = A^T[q,p] * G[p,r]
              tmp.resize(p * q);
              kernels::transpose(ag, tmp.data(), p, q);
              kernels::gemm(tmp.data(), gg, gb, q, p, r, true);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// broadcasting elementwise

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out;
  std::size_t na;
  std::size_t nb;
};

Broadcast resolve_broadcast(const char* name, const Shape& a, const Shape& b) {
  const std::size_t na = shape_numel(a);
  const std::size_t nb = shape_numel(b);
  if (a == b) return {a, na, nb};
  if (nb == 1 || (is_suffix(b, a) && nb > 0)) return {a, na, nb};
  if (na == 1 || (is_suffix(a, b) && na > 0)) return {b, na, nb};
  throw DimensionError(std::string(name) + ": shapes " + shape_to_string(a) + " and " +
                       shape_to_string(b) + " do not broadcast");
}

enum class BinaryKind { add, sub, mul, div };

// Calls f(i, ia, ib) for every output index. One operand always spans the
// output, the other repeats with period na or nb.
template <typename F>
void broadcast_loop(std::size_t n, std::size_t na, std::size_t nb, F f) {
  if (n == 0) return;
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t j = 0; j < nb; ++j) f(o + j, o + j, j);
  } else {
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t j = 0; j < na; ++j) f(o + j, j, o + j);
  }
}

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  static constexpr std::array<const char*, 4> kNames = {"add", "sub", "mul", "div"};
  const char* name = kNames[static_cast<int>(kind)];
  Broadcast bc = resolve_broadcast(name, a.shape(), b.shape());
  const std::size_t n = shape_numel(bc.out);
  const std::size_t na = bc.na;
  const std::size_t nb = bc.nb;
  std::vector<T> out(n);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data();
  switch (kind) {
    case BinaryKind::add:
      broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t y) { od[i] = ad[x] + bd[y]; });
      break;
    case BinaryKind::sub:
      broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t y) { od[i] = ad[x] - bd[y]; });
      break;
    case BinaryKind::mul:
      broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t y) { od[i] = ad[x] * bd[y]; });
      break;
    case BinaryKind::div:
      broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t y) { od[i] = ad[x] / bd[y]; });
      break;
  }
  return Tensor<T>::make_op(std::move(bc.out), std::move(out), name, {a, b},
                            [a, b, n, na, nb, kind](const std::vector<T>& gv) {
                              const T* ad = a.data().data();
                              const T* bd = b.data().data();
                              const T* g = gv.data();
                              if (tracks(a)) {
                                T* ga = a.grad_buffer().data();
                                switch (kind) {
                                  case BinaryKind::add:
                                  case BinaryKind::sub:
                                    broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
                                    break;
                                  case BinaryKind::mul:
                                    broadcast_loop(n, na, nb,
                                                   [=](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] * bd[y]; });
                                    break;
                                  case BinaryKind::div:
                                    broadcast_loop(n, na, nb,
                                                   [=](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] / bd[y]; });
                                    break;
                                }
                              }
                              if (tracks(b)) {
                                T* gb = b.grad_buffer().data();
                                switch (kind) {
                                  case BinaryKind::add:
                                    broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t, std::size_t y) { gb[y] += g[i]; });
                                    break;
                                  case BinaryKind::sub:
                                    broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t, std::size_t y) { gb[y] -= g[i]; });
                                    break;
                                  case BinaryKind::mul:
                                    broadcast_loop(n, na, nb,
                                                   [=](std::size_t i, std::size_t x, std::size_t y) { gb[y] += g[i] * ad[x]; });
                                    break;
                                  case BinaryKind::div:
                                    broadcast_loop(n, na, nb, [=](std::size_t i, std::size_t x, std::size_t y) {
                                      const T bv = bd[y];
                                      gb[y] -= g[i] * ad[x] / (bv * bv);
                                    });
                                    break;
                                }
                              }
                            });
}

// Pointwise map with a derivative expressed through input and output.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  Tensor<T> result = Tensor<T>::make_op(x.shape(), std::move(out), name, {x}, nullptr);
  if (!result.requires_grad()) return result;
  // The closure needs the output values; capture a weak reference to avoid
  // a node owning itself.
  std::weak_ptr<detail::Node<T>> self = result.node();
  result.node()->backward = [x, self, deriv](const std::vector<T>& g) {
    auto node = self.lock();
    const auto xd = x.data();
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], node->data[i]);
  };
  return result;
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// ---------------------------------------------------------------------------
// layout helpers (rank padded to 4 with leading unit extents)

std::array<std::size_t, 4> pad4(const Shape& s) {
  std::array<std::size_t, 4> out{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) out[off + i] = s[i];
  return out;
}

std::array<std::size_t, 4> strides4(const std::array<std::size_t, 4>& d) {
  return {d[1] * d[2] * d[3], d[2] * d[3], d[3], 1};
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, true);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::mul);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::div);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return unary(
      x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, "sigmoid", [](T v) { return sigmoid_scalar(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::acos(T(-1)));
  return unary(
      x, "gelu", [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [inv_sqrt2, inv_sqrt2pi](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, "abs", [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T c) {
  return unary(
      x, "clamp_max", [c](T v) { return v < c ? v : c; },
      [c](T v, T) { return v < c ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return Tensor<T>::make_op(Shape{}, {acc}, "sum", {x}, [x](const std::vector<T>& g) {
    auto& gx = x.grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T n = static_cast<T>(x.numel());
  return Tensor<T>::make_op(Shape{}, {acc / n}, "mean", {x}, [x, n](const std::vector<T>& g) {
    auto& gx = x.grad_buffer();
    const T share = g[0] / n;
    for (auto& v : gx) v += share;
  });
}

template <typename T>
Tensor<T> mean_hw(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("mean_hw expects [B,C,H,W], got " + shape_to_string(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  const auto xd = x.data();
  std::vector<T> out(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    T acc = T(0);
    for (std::size_t k = 0; k < hw; ++k) acc += xd[i * hw + k];
    out[i] = acc / static_cast<T>(hw);
  }
  return Tensor<T>::make_op(Shape{x.dim(0), x.dim(1)}, std::move(out), "mean_hw", {x},
                            [x, bc, hw](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              for (std::size_t i = 0; i < bc; ++i) {
                                const T share = g[i] / static_cast<T>(hw);
                                for (std::size_t k = 0; k < hw; ++k) gx[i * hw + k] += share;
                              }
                            });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  const auto xd = x.data();
  std::vector<T> y(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T total = T(0);
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= total;
    }
  }
  Tensor<T> result = Tensor<T>::make_op(x.shape(), std::move(y), "softmax", {x}, nullptr);
  if (!result.requires_grad()) return result;
  std::weak_ptr<detail::Node<T>> self = result.node();
  result.node()->backward = [x, self, outer, inner, len](const std::vector<T>& g) {
    auto node = self.lock();
    const auto& yd = node->data;
    auto& gx = x.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * yd[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          gx[idx] += yd[idx] * (g[idx] - dot);
        }
      }
    }
  };
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = x.dim(x.rank() - 1);
  if (gain.numel() != c || bias.numel() != c || gain.rank() != 1 || bias.rank() != 1) {
    throw DimensionError("layer_norm: input " + shape_to_string(x.shape()) + " expects gain/bias of [" +
                         std::to_string(c) + "], got " + shape_to_string(gain.shape()) + " and " +
                         shape_to_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / std::max<std::size_t>(c, 1);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * c;
    T mu = T(0);
    for (std::size_t k = 0; k < c; ++k) mu += row[k];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t k = 0; k < c; ++k) var += (row[k] - mu) * (row[k] - mu);
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t k = 0; k < c; ++k) {
      const T h = (row[k] - mu) * inv;
      xhat[r * c + k] = h;
      out[r * c + k] = h * gd[k] + bd[k];
    }
  }
  const bool keep = needs_grad<T>({&x, &gain, &bias});
  if (!keep) {
    xhat.clear();
    inv_std.clear();
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [x, gain, bias, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const std::vector<T>& g) {
        const auto gd = gain.data();
        if (tracks(gain) || tracks(bias)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < c; ++k) {
              if (tracks(gain)) gain.grad_buffer()[k] += g[r * c + k] * xhat[r * c + k];
              if (tracks(bias)) bias.grad_buffer()[k] += g[r * c + k];
            }
          }
        }
        if (!tracks(x)) return;
        auto& gx = x.grad_buffer();
        const T cn = static_cast<T>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_g = T(0), sum_gh = T(0);
          for (std::size_t k = 0; k < c; ++k) {
            const T gh = g[r * c + k] * gd[k];
            sum_g += gh;
            sum_gh += gh * xhat[r * c + k];
          }
          const T inv = inv_std[r];
          for (std::size_t k = 0; k < c; ++k) {
            const T gh = g[r * c + k] * gd[k];
            gx[r * c + k] += inv / cn * (cn * gh - sum_g - xhat[r * c + k] * sum_gh);
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects x [B,Cin,H,W] and w [Cout,Cin,k,k], got " +
                         shape_to_string(x.shape()) + " and " + shape_to_string(w.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw DimensionError("conv2d: channel mismatch between input " + shape_to_string(x.shape()) +
                         " and kernel " + shape_to_string(w.shape()));
  }
  if (w.dim(3) != k || k % 2 == 0) {
    throw ContractError("conv2d: kernel must be square with odd extent, got " + shape_to_string(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    throw DimensionError("conv2d: kernel " + shape_to_string(w.shape()) + " larger than padded input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t ho = h + 2 * padding - k + 1;
  const std::size_t wo = wd + 2 * padding - k + 1;
  const std::size_t ckk = cin * k * k;
  const std::size_t hw = ho * wo;
  const auto xd = x.data();

  auto im2col = [=](const T* xb, T* cols) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* row = cols + ((ci * k + ky) * k + kx) * hw;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(padding);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(padding);
              row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                                   ix >= static_cast<std::ptrdiff_t>(wd))
                                      ? T(0)
                                      : xb[(ci * h + iy) * wd + ix];
            }
          }
        }
      }
    }
  };

  const bool keep = needs_grad<T>({&x, &w, &bias});
  std::vector<T> cols_all(keep ? batch * ckk * hw : ckk * hw);
  std::vector<T> out(batch * cout * hw);
  const auto wdata = w.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* cols = cols_all.data() + (keep ? b * ckk * hw : 0);
    im2col(xd.data() + b * cin * h * wd, cols);
    T* ob = out.data() + b * cout * hw;
    kernels::gemm(wdata.data(), cols, ob, cout, ckk, hw, false);
    if (bias.defined()) {
      const auto bd = bias.data();
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t i = 0; i < hw; ++i) ob[co * hw + i] += bd[co];
      }
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(batch) * cout * ckk * hw);
  if (!keep) cols_all.clear();

  return Tensor<T>::make_op(
      Shape{batch, cout, ho, wo}, std::move(out), "conv2d", {x, w, bias},
      [=, cols_all = std::move(cols_all)](const std::vector<T>& g) {
        std::vector<T> tmp;
        std::vector<T> gcols;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* gb = g.data() + b * cout * hw;
          const T* cols = cols_all.data() + b * ckk * hw;
          if (tracks(w)) {
            tmp.resize(hw * ckk);
            kernels::transpose(cols, tmp.data(), ckk, hw);
            kernels::gemm(gb, tmp.data(), w.grad_buffer().data(), cout, hw, ckk, true);
          }
          if (tracks(bias)) {
            auto& gbias = bias.grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) {
              T acc = T(0);
              for (std::size_t i = 0; i < hw; ++i) acc += gb[co * hw + i];
              gbias[co] += acc;
            }
          }
          if (tracks(x)) {
            tmp.resize(ckk * cout);
            kernels::transpose(w.data().data(), tmp.data(), cout, ckk);
            gcols.resize(ckk * hw);
            kernels::gemm(tmp.data(), gb, gcols.data(), ckk, cout, hw, false);
            T* gx = x.grad_buffer().data() + b * cin * h * wd;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const T* row = gcols.data() + ((ci * k + ky) * k + kx) * hw;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                      gx[(ci * h + iy) * wd + ix] += row[oy * wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw DimensionError("pool2d expects [B,C,H,W], got " + shape_to_string(x.shape()));
  if (window == 0 || stride == 0) throw ContractError("pool2d: window and stride must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " larger than input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t ho = (h - window) / stride + 1;
  const std::size_t wo = (w - window) / stride + 1;
  const auto xd = x.data();
  std::vector<T> out(planes * ho * wo);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? out.size() : 0);
  const T area = static_cast<T>(window * window);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* xp = xd.data() + pl * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t o = (pl * ho + oy) * wo + ox;
        if (kind == PoolKind::max) {
          std::size_t best = (oy * stride) * w + ox * stride;
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
              if (xp[idx] > xp[best]) best = idx;
            }
          }
          out[o] = xp[best];
          argmax[o] = pl * h * w + best;
        } else {
          T acc = T(0);
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) acc += xp[(oy * stride + ky) * w + ox * stride + kx];
          }
          out[o] = acc / area;
        }
      }
    }
  }
  return Tensor<T>::make_op(
      Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), kind == PoolKind::max ? "max_pool2d" : "avg_pool2d",
      {x}, [=, argmax = std::move(argmax)](const std::vector<T>& g) {
        auto& gx = x.grad_buffer();
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
          return;
        }
        for (std::size_t pl = 0; pl < planes; ++pl) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const T share = g[(pl * ho + oy) * wo + ox] / area;
              for (std::size_t ky = 0; ky < window; ++ky) {
                for (std::size_t kx = 0; kx < window; ++kx) {
                  gx[pl * h * w + (oy * stride + ky) * w + ox * stride + kx] += share;
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_op(std::move(shape), std::move(out), "reshape", {x}, [x](const std::vector<T>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) {
    throw DimensionError("permute: order of length " + std::to_string(perm.size()) + " for " +
                         shape_to_string(x.shape()));
  }
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid axis order for " + shape_to_string(x.shape()));
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  // Map output axis i (padded to 4) to the input stride of axis perm[i].
  const auto in_dims = pad4(x.shape());
  const auto in_str = strides4(in_dims);
  const auto od = pad4(out_shape);
  std::array<std::size_t, 4> src_stride{0, 0, 0, 0};
  const std::size_t off = 4 - r;
  for (std::size_t i = 0; i < r; ++i) src_stride[off + i] = in_str[off + perm[i]];
  const auto xd = x.data();
  std::vector<T> out(x.numel());
  std::size_t o = 0;
  for (std::size_t a = 0; a < od[0]; ++a)
    for (std::size_t b = 0; b < od[1]; ++b)
      for (std::size_t c = 0; c < od[2]; ++c) {
        const std::size_t base = a * src_stride[0] + b * src_stride[1] + c * src_stride[2];
        for (std::size_t d = 0; d < od[3]; ++d) out[o++] = xd[base + d * src_stride[3]];
      }
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), "permute", {x},
                            [x, od, src_stride](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              std::size_t o = 0;
                              for (std::size_t a = 0; a < od[0]; ++a)
                                for (std::size_t b = 0; b < od[1]; ++b)
                                  for (std::size_t c = 0; c < od[2]; ++c) {
                                    const std::size_t base =
                                        a * src_stride[0] + b * src_stride[1] + c * src_stride[2];
                                    for (std::size_t d = 0; d < od[3]; ++d) gx[base + d * src_stride[3]] += g[o++];
                                  }
                            });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_to_string(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_to_string(s) + " incompatible with " + shape_to_string(ref) +
                           " along axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<T> out(outer * row);
  std::vector<std::size_t> offsets;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pd.begin() + o * chunk, pd.begin() + (o + 1) * chunk, out.begin() + o * row + col);
    }
    offsets.push_back(col);
    col += chunk;
  }
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), "concat", parts,
                            [parts, offsets, outer, inner, row, axis](const std::vector<T>& g) {
                              for (std::size_t k = 0; k < parts.size(); ++k) {
                                const auto& p = parts[k];
                                if (!tracks(p)) continue;
                                auto& gp = p.grad_buffer();
                                const std::size_t chunk = p.dim(axis) * inner;
                                for (std::size_t o = 0; o < outer; ++o) {
                                  for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * row + offsets[k] + i];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " exceeds " + shape_to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t row = x.dim(axis) * inner;
  const std::size_t chunk = length * inner;
  const auto xd = x.data();
  std::vector<T> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xd.begin() + o * row + start * inner, xd.begin() + o * row + start * inner + chunk,
              out.begin() + o * chunk);
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), "slice", {x},
                            [x, outer, row, chunk, start, inner](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t i = 0; i < chunk; ++i) gx[o * row + start * inner + i] += g[o * chunk + i];
                              }
                            });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("split: axis out of range for " + shape_to_string(x.shape()));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.dim(axis)) {
    throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis " + std::to_string(axis) +
                         " of " + shape_to_string(x.shape()) + " has extent " + std::to_string(x.dim(axis)));
  }
  std::vector<Tensor<T>> out;
  std::size_t start = 0;
  for (std::size_t s : sizes) {
    out.push_back(slice(x, axis, start, s));
    start += s;
  }
  return out;
}

template <typename T>
Tensor<T> pad(const Tensor<T>& x, const std::vector<std::pair<std::size_t, std::size_t>>& padding) {
  if (padding.size() != x.rank()) {
    throw DimensionError("pad: expected " + std::to_string(x.rank()) + " (before, after) pairs for " +
                         shape_to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  std::vector<std::size_t> before(x.rank());
  for (std::size_t i = 0; i < x.rank(); ++i) {
    out_shape[i] += padding[i].first + padding[i].second;
    before[i] = padding[i].first;
  }
  const auto id = pad4(x.shape());
  const auto od = pad4(out_shape);
  const auto os = strides4(od);
  std::array<std::size_t, 4> off{0, 0, 0, 0};
  for (std::size_t i = 0; i < x.rank(); ++i) off[4 - x.rank() + i] = before[i];
  const std::size_t base = off[0] * os[0] + off[1] * os[1] + off[2] * os[2] + off[3];
  const auto xd = x.data();
  std::vector<T> out(shape_numel(out_shape), T(0));
  std::size_t s = 0;
  for (std::size_t a = 0; a < id[0]; ++a)
    for (std::size_t b = 0; b < id[1]; ++b)
      for (std::size_t c = 0; c < id[2]; ++c) {
        T* dst = out.data() + base + a * os[0] + b * os[1] + c * os[2];
        for (std::size_t d = 0; d < id[3]; ++d) dst[d] = xd[s++];
      }
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), "pad", {x},
                            [x, id, os, base](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              std::size_t s = 0;
                              for (std::size_t a = 0; a < id[0]; ++a)
                                for (std::size_t b = 0; b < id[1]; ++b)
                                  for (std::size_t c = 0; c < id[2]; ++c) {
                                    const T* src = g.data() + base + a * os[0] + b * os[1] + c * os[2];
                                    for (std::size_t d = 0; d < id[3]; ++d) gx[s++] += src[d];
                                  }
                            });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, const std::vector<std::size_t>& offsets, Shape extents) {
  if (offsets.size() != x.rank() || extents.size() != x.rank()) {
    throw DimensionError("crop: offsets/extents rank mismatch for " + shape_to_string(x.shape()));
  }
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (offsets[i] + extents[i] > x.dim(i)) {
      throw DimensionError("crop: window " + shape_to_string(extents) + " at offset exceeds " +
                           shape_to_string(x.shape()));
    }
  }
  const auto is = strides4(pad4(x.shape()));
  const auto od = pad4(extents);
  std::array<std::size_t, 4> off{0, 0, 0, 0};
  for (std::size_t i = 0; i < x.rank(); ++i) off[4 - x.rank() + i] = offsets[i];
  const std::size_t base = off[0] * is[0] + off[1] * is[1] + off[2] * is[2] + off[3];
  const auto xd = x.data();
  std::vector<T> out(shape_numel(extents));
  std::size_t o = 0;
  for (std::size_t a = 0; a < od[0]; ++a)
    for (std::size_t b = 0; b < od[1]; ++b)
      for (std::size_t c = 0; c < od[2]; ++c) {
        const T* src = xd.data() + base + a * is[0] + b * is[1] + c * is[2];
        for (std::size_t d = 0; d < od[3]; ++d) out[o++] = src[d];
      }
  return Tensor<T>::make_op(std::move(extents), std::move(out), "crop", {x},
                            [x, od, is, base](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              std::size_t o = 0;
                              for (std::size_t a = 0; a < od[0]; ++a)
                                for (std::size_t b = 0; b < od[1]; ++b)
                                  for (std::size_t c = 0; c < od[2]; ++c) {
                                    T* dst = gx.data() + base + a * is[0] + b * is[1] + c * is[2];
                                    for (std::size_t d = 0; d < od[3]; ++d) dst[d] += g[o++];
                                  }
                            });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::int64_t> index) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: index length " + std::to_string(index.size()) + " does not match shape " +
                         shape_to_string(out_shape));
  }
  const auto xd = x.data();
  const auto n = static_cast<std::int64_t>(xd.size());
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t src = index[i];
    if (src >= n) throw DimensionError("gather: index out of range for " + shape_to_string(x.shape()));
    out[i] = src < 0 ? T(0) : xd[static_cast<std::size_t>(src)];
  }
  if (!needs_grad<T>({&x})) index.clear();
  return Tensor<T>::make_op(std::move(out_shape), std::move(out), "gather", {x},
                            [x, index = std::move(index)](const std::vector<T>& g) {
                              auto& gx = x.grad_buffer();
                              for (std::size_t i = 0; i < index.size(); ++i) {
                                if (index[i] >= 0) gx[static_cast<std::size_t>(index[i])] += g[i];
                              }
                            });
}

#define TADT_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                          \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> abs(const Tensor<T>&);                                                              \
  template Tensor<T> clamp_max(const Tensor<T>&, T);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> mean_hw(const Tensor<T>&);                                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);          \
  template Tensor<T> pool2d(const Tensor<T>&, PoolKind, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                 \
  template std::vector<Tensor<T>> split(const Tensor<T>&, const std::vector<std::size_t>&, std::size_t); \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template Tensor<T> pad(const Tensor<T>&, const std::vector<std::pair<std::size_t, std::size_t>>&);     \
  template Tensor<T> crop(const Tensor<T>&, const std::vector<std::size_t>&, Shape);                     \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::vector<std::int64_t>);

TADT_INSTANTIATE_OPS(float)
TADT_INSTANTIATE_OPS(double)

#undef TADT_INSTANTIATE_OPS

}  // namespace tadt
