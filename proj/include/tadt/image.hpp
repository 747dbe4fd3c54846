#pragma once

// 8-bit RGB image files and the PSNR metric. Images are [3,H,W] float
// tensors with values in [0,1].

#include <string>

#include "tadt/tensor.hpp"

namespace tadt {

using Image = Tensor<float>;

// Format is chosen by extension: .png or .ppm (binary P6, maxval 255).
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// v in [0,1] -> round-half-away-from-zero(v * 255), clamped to [0,255].
unsigned char to_byte(float v);

// 10 log10(peak^2 / MSE) over every channel and pixel; +inf when identical.
// Accepts [3,H,W] or [B,3,H,W] tensors of equal shape.
double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak = 1.0);

// Formats a PSNR value, printing "inf" for identical images.
std::string format_psnr(double db);

}  // namespace tadt
