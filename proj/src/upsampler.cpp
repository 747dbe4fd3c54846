#include "tadt/upsampler.hpp"

#include <algorithm>
#include <cmath>

namespace tadt {

namespace {

constexpr double kShiftEps = 1e-6;
constexpr double kBorder = 1.0 - 1e-6;
constexpr double kAreaEps = 1e-9;

struct Lookup {
  std::size_t iy, ix;
  double rel_y, rel_x;  // in units of feature cells
};

// Nearest latent cell for a (possibly shifted) query.
Lookup lookup(double y, double x, double vy, double vx, double eps, std::size_t h, std::size_t w) {
  const double ry = 1.0 / static_cast<double>(h), rx = 1.0 / static_cast<double>(w);
  const double cy = std::clamp(y + vy * ry + eps, -kBorder, kBorder);
  const double cx = std::clamp(x + vx * rx + eps, -kBorder, kBorder);
  auto nearest = [](double c, std::size_t n) {
    const double f = std::floor((c + 1.0) * static_cast<double>(n) / 2.0);
    return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(n - 1)));
  };
  Lookup l;
  l.iy = nearest(cy, h);
  l.ix = nearest(cx, w);
  l.rel_y = (y - pixel_center(l.iy, h)) * static_cast<double>(h);
  l.rel_x = (x - pixel_center(l.ix, w)) * static_cast<double>(w);
  return l;
}

constexpr std::array<std::array<double, 2>, 4> kShifts{{{-1, -1}, {-1, 1}, {1, -1}, {1, 1}}};

}  // namespace

double pixel_center(std::size_t i, std::size_t n) {
  return -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(n);
}

CoordGrid make_coord_grid(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ContractError("coordinate grid extents must be positive");
  CoordGrid g;
  g.height = height;
  g.width = width;
  g.coords.reserve(2 * height * width);
  g.cells.reserve(2 * height * width);
  const double cy = 2.0 / static_cast<double>(height), cx = 2.0 / static_cast<double>(width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      g.coords.push_back(pixel_center(i, height));
      g.coords.push_back(pixel_center(j, width));
      g.cells.push_back(cy);
      g.cells.push_back(cx);
    }
  }
  return g;
}

std::array<double, 4> ensemble_weights(double y, double x, std::size_t feat_h, std::size_t feat_w) {
  std::array<double, 4> area{};
  double total = 0.0;
  for (std::size_t s = 0; s < 4; ++s) {
    const Lookup l = lookup(y, x, kShifts[s][0], kShifts[s][1], kShiftEps, feat_h, feat_w);
    area[s] = std::fabs(l.rel_y * l.rel_x) + kAreaEps;
    total += area[s];
  }
  return {area[3] / total, area[2] / total, area[1] / total, area[0] / total};
}

std::size_t upsampled_extent(std::size_t n, double s) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * s)));
}

template <typename T>
Liif<T> Liif<T>::create(std::size_t feature_channels, const UpsamplerConfig& config, Rng& rng) {
  config.validate();
  Liif u;
  u.config = config;
  u.feature_channels = feature_channels;
  std::size_t in = u.input_width();
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::size_t out = i + 1 == config.layers ? 3 : config.hidden;
    u.mlp.push_back(Linear<T>::create(in, out, true, LinearInit::fan_in_uniform, rng));
    in = out;
  }
  return u;
}

template <typename T>
std::size_t Liif<T>::input_width() const {
  return feature_channels * (config.feat_unfold ? 9 : 1) + 2 + (config.cell_decode ? 2 : 0);
}

template <typename T>
Tensor<T> Liif<T>::query_rgb(const Tensor<T>& feature, const Tensor<T>& coords, const Tensor<T>& cells) const {
  if (feature.rank() != 4 || feature.dim(1) != feature_channels) {
    throw DimensionError("upsampler expects [B," + std::to_string(feature_channels) + ",h,w] features, got " +
                         shape_to_string(feature.shape()));
  }
  const std::size_t b = feature.dim(0), c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  if (coords.rank() != 3 || coords.dim(0) != b || coords.dim(2) != 2 || cells.shape() != coords.shape()) {
    throw DimensionError("coords and cells must both be [B,Q,2] with B = " + std::to_string(b) + ", got " +
                         shape_to_string(coords.shape()) + " and " + shape_to_string(cells.shape()));
  }
  const std::size_t q = coords.dim(1);
  const auto cd = coords.data();
  const auto celld = cells.data();
  for (std::size_t i = 0; i < cd.size(); ++i) {
    if (!(cd[i] >= T(-1) && cd[i] <= T(1))) {
      throw ContractError("query coordinate " + std::to_string(static_cast<double>(cd[i])) + " outside [-1,1]");
    }
  }

  const bool ensemble = config.local_ensemble;
  const std::size_t shifts = ensemble ? 4 : 1;
  const std::size_t taps = config.feat_unfold ? 9 : 1;
  const std::size_t code = c * taps;
  const std::size_t extra = config.cell_decode ? 4 : 2;

  std::vector<std::int64_t> index(b * shifts * q * code);
  std::vector<T> side(b * shifts * q * extra);
  std::vector<T> weights(b * shifts * q * 3);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t qi = 0; qi < q; ++qi) {
      const double y = cd[(bi * q + qi) * 2], x = cd[(bi * q + qi) * 2 + 1];
      const std::array<double, 4> ew =
          ensemble ? ensemble_weights(y, x, h, w) : std::array<double, 4>{1.0, 0.0, 0.0, 0.0};
      for (std::size_t s = 0; s < shifts; ++s) {
        const Lookup l = ensemble ? lookup(y, x, kShifts[s][0], kShifts[s][1], kShiftEps, h, w)
                                  : lookup(y, x, 0.0, 0.0, 0.0, h, w);
        const std::size_t row = (bi * shifts + s) * q + qi;
        std::int64_t* idx = index.data() + row * code;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t t = 0; t < taps; ++t) {
            const long yy = static_cast<long>(l.iy) + (taps == 9 ? static_cast<long>(t / 3) - 1 : 0);
            const long xx = static_cast<long>(l.ix) + (taps == 9 ? static_cast<long>(t % 3) - 1 : 0);
            const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w);
            idx[ch * taps + t] =
                inside ? static_cast<std::int64_t>(((bi * c + ch) * h + static_cast<std::size_t>(yy)) * w +
                                                   static_cast<std::size_t>(xx))
                       : -1;
          }
        }
        T* sd = side.data() + row * extra;
        sd[0] = static_cast<T>(l.rel_y);
        sd[1] = static_cast<T>(l.rel_x);
        if (config.cell_decode) {
          sd[2] = static_cast<T>(static_cast<double>(celld[(bi * q + qi) * 2]) * static_cast<double>(h));
          sd[3] = static_cast<T>(static_cast<double>(celld[(bi * q + qi) * 2 + 1]) * static_cast<double>(w));
        }
        for (std::size_t k = 0; k < 3; ++k) weights[row * 3 + k] = static_cast<T>(ew[s]);
      }
    }
  }

  Tensor<T> codes = gather(feature, {b, shifts, q, code}, std::move(index));
  Tensor<T> input = concat<T>({codes, Tensor<T>({b, shifts, q, extra}, std::move(side))}, 3);
  Tensor<T> hdn = input;
  for (std::size_t i = 0; i < mlp.size(); ++i) {
    hdn = mlp[i](hdn);
    if (i + 1 < mlp.size()) hdn = gelu(hdn);
  }
  Tensor<T> raw;
  if (shifts == 1) {
    raw = reshape(hdn, {b, q, 3});
  } else {
    Tensor<T> weighted = mul(hdn, Tensor<T>({b, shifts, q, 3}, std::move(weights)));
    auto parts = split(weighted, {1, 1, 1, 1}, 1);
    raw = reshape(add(add(add(parts[0], parts[1]), parts[2]), parts[3]), {b, q, 3});
  }
  return add(scale(raw, T(0.5)), Tensor<T>::scalar(T(0.5)));
}

template <typename T>
Tensor<T> Liif<T>::full_upsample(const Tensor<T>& feature, double s, std::size_t chunk) const {
  if (!(s >= 1.0)) throw ContractError("upsampling scale must be >= 1, got " + std::to_string(s));
  if (feature.rank() != 4) throw DimensionError("full_upsample expects [B,C,h,w], got " + shape_to_string(feature.shape()));
  if (chunk == 0) chunk = config.query_chunk;
  const std::size_t b = feature.dim(0);
  const std::size_t ho = upsampled_extent(feature.dim(2), s), wo = upsampled_extent(feature.dim(3), s);
  const CoordGrid grid = make_coord_grid(ho, wo);
  const std::size_t total = grid.size();
  std::vector<T> out(b * 3 * total);
  NoGradGuard guard;
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t n = std::min(chunk, total - start);
    std::vector<T> cs(b * n * 2), ce(b * n * 2);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t i = 0; i < 2 * n; ++i) {
        cs[bi * n * 2 + i] = static_cast<T>(grid.coords[start * 2 + i]);
        ce[bi * n * 2 + i] = static_cast<T>(grid.cells[start * 2 + i]);
      }
    }
    Tensor<T> rgb = query_rgb(feature, Tensor<T>({b, n, 2}, std::move(cs)), Tensor<T>({b, n, 2}, std::move(ce)));
    const auto rd = rgb.data();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) out[(bi * 3 + ch) * total + start + i] = rd[(bi * n + i) * 3 + ch];
      }
    }
  }
  return Tensor<T>({b, 3, ho, wo}, std::move(out));
}

template <typename T>
void Liif<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < mlp.size(); ++i) mlp[i].collect(out, prefix + ".mlp" + std::to_string(i + 1));
}

template struct Liif<float>;
template struct Liif<double>;

}  // namespace tadt
