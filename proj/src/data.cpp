#include "tadt/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "tadt/errors.hpp"
#include "tadt/ops.hpp"

namespace tadt {

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::fabs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

ResampleTaps resample_taps(std::size_t n_in, std::size_t n_out) {
  if (n_in == 0 || n_out == 0) throw ContractError("resample extents must be positive");
  const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
  const double filter_scale = std::max(scale, 1.0);
  const double support = 2.0 * filter_scale;
  ResampleTaps taps;
  taps.first.resize(n_out);
  taps.weights.resize(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale;
    const auto lo = static_cast<long>(std::max(0.0, std::floor(center - support + 0.5)));
    const auto hi = static_cast<long>(std::min(static_cast<double>(n_in), std::floor(center + support + 0.5)));
    std::vector<double> w;
    double total = 0.0;
    for (long x = lo; x < hi; ++x) {
      const double v = cubic_kernel((static_cast<double>(x) - center + 0.5) / filter_scale);
      w.push_back(v);
      total += v;
    }
    if (total != 0.0) {
      for (double& v : w) v /= total;
    }
    taps.first[i] = static_cast<std::size_t>(lo);
    taps.weights[i] = std::move(w);
  }
  return taps;
}

Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw DimensionError("bicubic_resize expects [3,H,W], got " + shape_to_string(img.shape()));
  }
  if (out_h == 0 || out_w == 0) throw ContractError("bicubic_resize: output extent is zero");
  const std::size_t h = img.dim(1), w = img.dim(2);
  const ResampleTaps th = resample_taps(h, out_h);
  const ResampleTaps tw = resample_taps(w, out_w);
  const auto src = img.data();
  std::vector<double> rows(3 * h * out_w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const float* in = src.data() + (c * h + y) * w;
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        const auto& k = tw.weights[x];
        for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * static_cast<double>(in[tw.first[x] + t]);
        rows[(c * h + y) * out_w + x] = acc;
      }
    }
  }
  std::vector<float> out(3 * out_h * out_w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& k = th.weights[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * rows[(c * h + th.first[y] + t) * out_w + x];
        out[(c * out_h + y) * out_w + x] = static_cast<float>(acc);
      }
    }
  }
  return Image({3, out_h, out_w}, std::move(out));
}

Image bicubic_downsample(const Image& img, double s_down) {
  if (!(s_down >= 1.0)) throw ContractError("bicubic_downsample: scale must be >= 1");
  if (img.rank() != 3) throw DimensionError("bicubic_downsample expects [3,H,W]");
  const auto oh = static_cast<std::size_t>(std::llround(static_cast<double>(img.dim(1)) / s_down));
  const auto ow = static_cast<std::size_t>(std::llround(static_cast<double>(img.dim(2)) / s_down));
  if (oh == 0 || ow == 0) throw ContractError("bicubic_downsample: output extent rounds to zero");
  return bicubic_resize(img, oh, ow);
}

namespace {

struct Color {
  double v[3];
};

Color random_color(Rng& rng) { return {{rng.uniform(), rng.uniform(), rng.uniform()}}; }

double lerp(double a, double b, double t) { return a + (b - a) * t; }

void fill_gradient(std::vector<double>& px, std::size_t h, std::size_t w, Rng& rng) {
  const Color c0 = random_color(rng), c1 = random_color(rng);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double extent = std::fabs(ct) * static_cast<double>(w) + std::fabs(st) * static_cast<double>(h);
  const double cx = static_cast<double>(w) / 2.0, cy = static_cast<double>(h) / 2.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double t = std::clamp(((static_cast<double>(x) - cx) * ct + (static_cast<double>(y) - cy) * st) / extent + 0.5,
                                  0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) px[(c * h + y) * w + x] = lerp(c0.v[c], c1.v[c], t);
    }
  }
}

void fill_checkerboard(std::vector<double>& px, std::size_t h, std::size_t w, Rng& rng) {
  const Color c0 = random_color(rng), c1 = random_color(rng);
  const double cell = rng.uniform(4.0, 14.0);
  const double theta = rng.uniform(0.0, std::numbers::pi / 2.0);
  const double ct = std::cos(theta), st = std::sin(theta);
  // 2x2 supersampling softens the edges.
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double t = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double fx = static_cast<double>(x) + 0.25 + 0.5 * sx, fy = static_cast<double>(y) + 0.25 + 0.5 * sy;
          const double u = (fx * ct + fy * st) / cell, v = (-fx * st + fy * ct) / cell;
          const auto parity = (static_cast<long>(std::floor(u)) + static_cast<long>(std::floor(v))) & 1L;
          t += parity ? 0.25 : 0.0;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) px[(c * h + y) * w + x] = lerp(c0.v[c], c1.v[c], t);
    }
  }
}

void fill_gabor(std::vector<double>& px, std::size_t h, std::size_t w, Rng& rng) {
  const Color base = random_color(rng), amp = random_color(rng);
  const double freq = rng.uniform(0.04, 0.2);  // cycles per pixel
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double sigma = rng.uniform(0.25, 0.6) * static_cast<double>(std::min(h, w));
  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(w), cy = rng.uniform(0.3, 0.7) * static_cast<double>(h);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      const double wave = std::cos(2.0 * std::numbers::pi * freq * (dx * ct + dy * st) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        px[(c * h + y) * w + x] = std::clamp(base.v[c] + 0.5 * (amp.v[c] - 0.5) * 2.0 * wave * env, 0.0, 1.0);
      }
    }
  }
}

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const double xi = poly[i][0], yi = poly[i][1], xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) in = !in;
  }
  return in;
}

void fill_polygons(std::vector<double>& px, std::size_t h, std::size_t w, Rng& rng) {
  fill_gradient(px, h, w, rng);
  const std::size_t count = 3 + rng.below(4);
  for (std::size_t p = 0; p < count; ++p) {
    const Color col = random_color(rng);
    const std::size_t verts = 3 + rng.below(4);
    const double cx = rng.uniform(0.0, static_cast<double>(w)), cy = rng.uniform(0.0, static_cast<double>(h));
    const double radius = rng.uniform(0.15, 0.4) * static_cast<double>(std::min(h, w));
    std::vector<double> angles(verts);
    for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    std::vector<std::array<double, 2>> poly;
    for (double a : angles) {
      const double r = radius * rng.uniform(0.5, 1.0);
      poly.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double cover = 0.0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            if (inside_polygon(poly, static_cast<double>(x) + 0.25 + 0.5 * sx, static_cast<double>(y) + 0.25 + 0.5 * sy)) {
              cover += 0.25;
            }
          }
        }
        if (cover == 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = px[(c * h + y) * w + x];
          v = lerp(v, col.v[c], cover);
        }
      }
    }
  }
}

}  // namespace

std::vector<Image> make_toy_images(std::size_t count, std::size_t min_size, std::size_t max_size,
                                   std::uint64_t seed) {
  if (min_size == 0 || max_size < min_size) throw ConfigError("invalid toy image size range");
  Rng rng(seed);
  std::vector<Image> images;
  images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t h = min_size + rng.below(max_size - min_size + 1);
    const std::size_t w = min_size + rng.below(max_size - min_size + 1);
    std::vector<double> px(3 * h * w);
    switch (i % 4) {
      case 0: fill_gradient(px, h, w, rng); break;
      case 1: fill_checkerboard(px, h, w, rng); break;
      case 2: fill_gabor(px, h, w, rng); break;
      default: fill_polygons(px, h, w, rng); break;
    }
    // Quantize to 8 bits like decoded image files.
    std::vector<float> data(px.size());
    for (std::size_t k = 0; k < px.size(); ++k) {
      data[k] = static_cast<float>(to_byte(static_cast<float>(px[k]))) / 255.0f;
    }
    images.emplace_back(Shape{3, h, w}, std::move(data));
  }
  return images;
}

std::vector<Image> load_image_folder(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .png or .ppm images in " + dir);
  std::vector<Image> images;
  for (const auto& f : files) images.push_back(read_image(f.string()));
  return images;
}

Image crop_image(const Image& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  if (img.rank() != 3 || y + h > img.dim(1) || x + w > img.dim(2)) {
    throw DimensionError("crop outside image " + shape_to_string(img.shape()));
  }
  const std::size_t ih = img.dim(1), iw = img.dim(2);
  const auto src = img.data();
  std::vector<float> out(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      const float* row = src.data() + (c * ih + y + r) * iw + x;
      std::copy(row, row + w, out.begin() + static_cast<std::ptrdiff_t>((c * h + r) * w));
    }
  }
  return Image({3, h, w}, std::move(out));
}

std::optional<TrainSample> synthesize_pair(const Image& hr, std::size_t patch, double scale_min, double scale_max,
                                           Rng& rng) {
  if (hr.rank() != 3 || hr.dim(0) != 3) throw DimensionError("synthesize_pair expects [3,H,W] images");
  const double s = rng.uniform(scale_min, scale_max);
  const auto crop = static_cast<std::size_t>(std::llround(static_cast<double>(patch) * s));
  const std::size_t h = hr.dim(1), w = hr.dim(2);
  if (crop > h || crop > w) return std::nullopt;
  TrainSample t;
  t.scale = s;
  t.crop = crop;
  t.crop_y = rng.below(h - crop + 1);
  t.crop_x = rng.below(w - crop + 1);
  const Image hr_crop = crop_image(hr, t.crop_y, t.crop_x, crop, crop);
  const Image lr = bicubic_resize(hr_crop, patch, patch);
  t.lr = reshape(lr, {1, 3, patch, patch});

  // Partial Fisher-Yates: the first q entries become a uniform sample
  // without replacement.
  const std::size_t total = crop * crop, q = patch * patch;
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  for (std::size_t i = 0; i < q; ++i) std::swap(order[i], order[i + rng.below(total - i)]);

  std::vector<float> coords(2 * q), cells(2 * q), target(3 * q);
  const auto src = hr_crop.data();
  const auto cell = static_cast<float>(2.0 / static_cast<double>(crop));
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t py = order[i] / crop, px = order[i] % crop;
    coords[2 * i] = static_cast<float>(-1.0 + static_cast<double>(2 * py + 1) / static_cast<double>(crop));
    coords[2 * i + 1] = static_cast<float>(-1.0 + static_cast<double>(2 * px + 1) / static_cast<double>(crop));
    cells[2 * i] = cell;
    cells[2 * i + 1] = cell;
    for (std::size_t c = 0; c < 3; ++c) target[3 * i + c] = src[(c * crop + py) * crop + px];
  }
  t.coords = Tensor<float>({1, q, 2}, std::move(coords));
  t.cells = Tensor<float>({1, q, 2}, std::move(cells));
  t.target = Tensor<float>({1, q, 3}, std::move(target));
  return t;
}

TrainSample draw_sample(const std::vector<Image>& images, std::size_t patch, double scale_min, double scale_max,
                        Rng& rng, std::size_t* skipped) {
  if (images.empty()) throw ContractError("no training images");
  const auto smallest_crop = static_cast<std::size_t>(std::llround(static_cast<double>(patch) * scale_min));
  const bool any_fits = std::any_of(images.begin(), images.end(), [&](const Image& im) {
    return im.dim(1) >= smallest_crop && im.dim(2) >= smallest_crop;
  });
  if (!any_fits) {
    throw ContractError("no training image can hold a " + std::to_string(smallest_crop) + " px crop");
  }
  while (true) {
    const Image& img = images[rng.below(images.size())];
    if (auto t = synthesize_pair(img, patch, scale_min, scale_max, rng)) return std::move(*t);
    if (skipped) ++*skipped;
  }
}

}  // namespace tadt
