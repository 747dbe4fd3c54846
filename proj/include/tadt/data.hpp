#pragma once

// Bicubic resampling, the procedural toy dataset and training-pair
// synthesis.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tadt/image.hpp"
#include "tadt/rng.hpp"

namespace tadt {

// Keys cubic convolution kernel with a = -0.5.
double cubic_kernel(double x);

// Per-output-pixel taps of a 1-D resample from n_in to n_out samples.
// Downscaling widens the kernel by the scale factor (antialiasing); taps
// are clipped to the valid input range and renormalized to sum to 1.
struct ResampleTaps {
  std::vector<std::size_t> first;        // first input index per output pixel
  std::vector<std::vector<double>> weights;
};
ResampleTaps resample_taps(std::size_t n_in, std::size_t n_out);

// img [3,H,W] -> [3,out_h,out_w], separable (rows first, then columns).
Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w);
// Downsample by s_down >= 1 to round(H/s) x round(W/s).
Image bicubic_downsample(const Image& img, double s_down);

// Procedural images of random size in [min_size, max_size]: linear
// gradients, checkerboards, Gabor textures and polygons, cycling in that
// order. Fully determined by seed.
std::vector<Image> make_toy_images(std::size_t count, std::size_t min_size, std::size_t max_size,
                                   std::uint64_t seed);

// All .png and .ppm files of a directory, sorted by file name.
std::vector<Image> load_image_folder(const std::string& dir);

// Crop [3,h,w] at (y,x).
Image crop_image(const Image& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w);

struct TrainSample {
  Tensor<float> lr;       // [1,3,P,P]
  double scale = 1.0;
  Tensor<float> coords;   // [1,Q,2]
  Tensor<float> cells;    // [1,Q,2]
  Tensor<float> target;   // [1,Q,3]
  std::size_t crop = 0;   // HR crop side round(P s)
  std::size_t crop_y = 0, crop_x = 0;
};

// Draws s ~ U(scale_min, scale_max), crops a round(P s) square at a random
// position, bicubic-downsamples it to P x P and samples P*P HR pixels
// without replacement. Returns nothing when the image is smaller than the
// crop; the scale draw is consumed either way.
std::optional<TrainSample> synthesize_pair(const Image& hr, std::size_t patch, double scale_min, double scale_max,
                                           Rng& rng);

// Cycles through images (a random one per draw) until a pair fits,
// counting skipped draws. Throws ContractError if no image can hold the
// largest crop.
TrainSample draw_sample(const std::vector<Image>& images, std::size_t patch, double scale_min, double scale_max,
                        Rng& rng, std::size_t* skipped = nullptr);

}  // namespace tadt
