#pragma once

// Local implicit image function: decodes a feature map to RGB at arbitrary
// continuous query coordinates.

#include <array>
#include <cstddef>
#include <vector>

#include "tadt/config.hpp"
#include "tadt/nn.hpp"

namespace tadt {

// -1 + (2i+1)/n
double pixel_center(std::size_t i, std::size_t n);

// Row-major query grid over an H_out x W_out image; coordinates are (y, x).
struct CoordGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> coords;  // [Q,2]
  std::vector<double> cells;   // [Q,2], constant (2/H_out, 2/W_out)

  std::size_t size() const { return height * width; }
};

CoordGrid make_coord_grid(std::size_t height, std::size_t width);

// Area weights of the four nearest latent codes for one query, in the
// order of the shifts (vy, vx) = (-1,-1), (-1,1), (1,-1), (1,1). Each code's
// prediction is weighted by the area of the rectangle spanned by the
// diagonally opposite code, normalized to sum to 1.
std::array<double, 4> ensemble_weights(double y, double x, std::size_t feat_h, std::size_t feat_w);

template <typename T>
struct Liif {
  UpsamplerConfig config;
  std::size_t feature_channels = 0;
  std::vector<Linear<T>> mlp;

  static Liif create(std::size_t feature_channels, const UpsamplerConfig& config, Rng& rng);

  std::size_t input_width() const;

  // feature [B,C,h,w]; coords and cells [B,Q,2] -> rgb [B,Q,3] in image
  // range (the decoder's raw output r is mapped to 0.5 r + 0.5).
  Tensor<T> query_rgb(const Tensor<T>& feature, const Tensor<T>& coords, const Tensor<T>& cells) const;

  // Decodes the full round(h s) x round(w s) grid without recording
  // gradients, chunk queries at a time (0: config.query_chunk).
  Tensor<T> full_upsample(const Tensor<T>& feature, double s, std::size_t chunk = 0) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

std::size_t upsampled_extent(std::size_t n, double s);

}  // namespace tadt
