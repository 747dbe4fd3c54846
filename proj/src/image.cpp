#include "tadt/image.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <vector>

#include "tadt/errors.hpp"

namespace tadt {

namespace {

std::string extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

Image from_interleaved(const std::vector<unsigned char>& px, std::size_t h, std::size_t w) {
  std::vector<float> data(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 3; ++c) data[c * h * w + i] = static_cast<float>(px[i * 3 + c]) / 255.0f;
  }
  return Image({3, h, w}, std::move(data));
}

std::vector<unsigned char> to_interleaved(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw DimensionError("image must be [3,H,W], got " + shape_to_string(img.shape()));
  }
  const std::size_t hw = img.dim(1) * img.dim(2);
  const auto d = img.data();
  std::vector<unsigned char> px(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = to_byte(d[c * hw + i]);
  }
  return px;
}

// Skips whitespace and # comments between PPM header fields.
std::size_t ppm_field(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  std::size_t v = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    any = true;
    ch = in.get();
  }
  if (!any) throw IoError(path + ": malformed PPM header");
  return v;  // the single whitespace after the field has been consumed
}

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

unsigned char to_byte(float v) {
  const double x = std::round(static_cast<double>(v) * 255.0);  // std::round rounds half away from zero
  if (!(x > 0.0)) return 0;
  if (x >= 255.0) return 255;
  return static_cast<unsigned char>(x);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw IoError(path + ": not a binary PPM (P6) file");
  const std::size_t w = ppm_field(in, path);
  const std::size_t h = ppm_field(in, path);
  const std::size_t maxval = ppm_field(in, path);
  if (maxval != 255) throw IoError(path + ": unsupported PPM maxval " + std::to_string(maxval) + " (expected 8-bit)");
  if (w == 0 || h == 0) throw IoError(path + ": empty image");
  std::vector<unsigned char> px(3 * w * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!in) throw IoError(path + ": truncated PPM payload");
  return from_interleaved(px, h, w);
}

void write_ppm(const std::string& path, const Image& img) {
  const auto px = to_interleaved(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P6\n" << img.dim(2) << ' ' << img.dim(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("error while writing " + path);
}

Image read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path + ": not a PNG file");
  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw IoError("libpng initialization failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("libpng initialization failed");
  // libpng reports errors by longjmp. Each setjmp below is armed only after
  // every object with a destructor in this frame already exists.
  if (setjmp(png_jmpbuf(g.png))) throw IoError(path + ": corrupt PNG data");
  png_init_io(g.png, f.get());
  png_set_sig_bytes(g.png, 8);
  png_read_info(g.png, g.info);
  const png_uint_32 w = png_get_image_width(g.png, g.info);
  const png_uint_32 h = png_get_image_height(g.png, g.info);
  const int depth = png_get_bit_depth(g.png, g.info);
  const int color = png_get_color_type(g.png, g.info);
  if (depth != 8) throw IoError(path + ": unsupported bit depth " + std::to_string(depth) + " (expected 8)");
  if (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_RGB_ALPHA) {
    throw IoError(path + ": expected 3-channel RGB");
  }
  std::vector<unsigned char> px(3 * static_cast<std::size_t>(w) * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = px.data() + static_cast<std::size_t>(y) * w * 3;
  if (setjmp(png_jmpbuf(g.png))) throw IoError(path + ": corrupt PNG data");
  if (color == PNG_COLOR_TYPE_RGB_ALPHA) png_set_strip_alpha(g.png);
  png_read_update_info(g.png, g.info);
  png_read_image(g.png, rows.data());
  png_read_end(g.png, nullptr);
  return from_interleaved(px, h, w);
}

void write_png(const std::string& path, const Image& img) {
  auto px = to_interleaved(img);
  const auto h = static_cast<png_uint_32>(img.dim(1)), w = static_cast<png_uint_32>(img.dim(2));
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path);
  PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw IoError("libpng initialization failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError("libpng initialization failed");
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = px.data() + static_cast<std::size_t>(y) * w * 3;
  if (setjmp(png_jmpbuf(g.png))) throw IoError("error while writing " + path);
  png_init_io(g.png, f.get());
  png_set_IHDR(g.png, g.info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  png_write_image(g.png, rows.data());
  png_write_end(g.png, nullptr);
}

Image read_image(const std::string& path) {
  const std::string ext = extension(path);
  if (ext == "png") return read_png(path);
  if (ext == "ppm") return read_ppm(path);
  throw IoError(path + ": unsupported image format (expected .png or .ppm)");
}

void write_image(const std::string& path, const Image& img) {
  const std::string ext = extension(path);
  if (ext == "png") return write_png(path, img);
  if (ext == "ppm") return write_ppm(path, img);
  throw IoError(path + ": unsupported image format (expected .png or .ppm)");
}

double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak) {
  if (a.shape() != b.shape()) {
    throw DimensionError("psnr: shapes differ, " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  if (!(peak > 0.0)) throw ContractError("psnr: peak must be positive");
  if (a.numel() == 0) throw DimensionError("psnr of empty images");
  const auto ad = a.data(), bd = b.data();
  double se = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(ad.size());
  return 10.0 * std::log10(peak * peak / mse);
}

std::string format_psnr(double db) {
  if (std::isinf(db)) return "inf";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << db;
  return os.str();
}

}  // namespace tadt
