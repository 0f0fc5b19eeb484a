#pragma once

#include <fftw3.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/kernels.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"

namespace deepdeblur {

/// Planar float image: data[(c*height + y)*width + x], values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<double> data;

  static Image create(int height, int width, int channels, double fill = 0.0) {
    if (height < 1 || width < 1 || (channels != 1 && channels != 3))
      throw DimensionError("image dimensions invalid");
    Image img;
    img.height = height;
    img.width = width;
    img.channels = channels;
    img.data.assign(static_cast<size_t>(channels) * height * width, fill);
    return img;
  }

  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

inline Image load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("load_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("load_png: libpng initialization failed");
  }

  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  std::string error;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("load_png: " + (error.empty() ? "decode failed for " + path : error));
  }

  png_init_io(png, fp);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth != 8 || (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB)) {
    error = "load_png: only 8-bit grayscale/RGB supported: " + path;
    longjmp(png_jmpbuf(png), 1);
  }
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int channels = color_type == PNG_COLOR_TYPE_GRAY ? 1 : 3;

  pixels.resize(static_cast<size_t>(height) * width * channels);
  rows.resize(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  Image img = Image::create(height, width, channels);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        img.at(c, y, x) =
            pixels[(static_cast<size_t>(y) * width + x) * channels + c] / 255.0;
  return img;
}

inline void save_png(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw DimensionError("save_png: image must have 1 or 3 channels");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("save_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("save_png: libpng initialization failed");
  }

  std::vector<unsigned char> pixels(static_cast<size_t>(img.height) * img.width *
                                    img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        pixels[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
            static_cast<unsigned char>(
                std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0));
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] =
        pixels.data() + static_cast<size_t>(y) * img.width * img.channels;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("save_png: encode failed for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("save_png: write failed for " + path);
}

namespace detail {

/// FFTW plans per transform size, built once under a lock with FFTW_ESTIMATE
/// (measurement-free, so planning is deterministic). Execution uses the
/// new-array interface on fftw_malloc'd buffers, which is thread-safe.
struct FftPlanPair {
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
};

inline const FftPlanPair& fft_plans(int fh, int fw) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, FftPlanPair> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({fh, fw});
  if (it != cache.end()) return it->second;
  double* re = fftw_alloc_real(static_cast<size_t>(fh) * fw);
  fftw_complex* cx = fftw_alloc_complex(static_cast<size_t>(fh) * (fw / 2 + 1));
  FftPlanPair plans;
  plans.fwd = fftw_plan_dft_r2c_2d(fh, fw, re, cx, FFTW_ESTIMATE);
  plans.inv = fftw_plan_dft_c2r_2d(fh, fw, cx, re, FFTW_ESTIMATE);
  fftw_free(re);
  fftw_free(cx);
  if (!plans.fwd || !plans.inv) throw DegradationError("fftw planning failed");
  return cache.emplace(std::pair<int, int>{fh, fw}, plans).first->second;
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

}  // namespace detail

/// True 2D convolution of one channel with the kernel (kernel flipped
/// relative to cross-correlation), replicate-padded "same" output, kernel
/// center at (kH/2, kW/2). Direct loop-nest path.
inline void convolve_channel_direct(const double* src, int h, int w, const double* k,
                                    int kh, int kw, double* out) {
  const int cy = kh / 2, cx = kw / 2;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int u = 0; u < kh; ++u) {
        const int sy = std::clamp(y - u + cy, 0, h - 1);
        const double* row = src + static_cast<size_t>(sy) * w;
        const double* krow = k + static_cast<size_t>(u) * kw;
        for (int v = 0; v < kw; ++v)
          acc += krow[v] * row[std::clamp(x - v + cx, 0, w - 1)];
      }
      out[static_cast<size_t>(y) * w + x] = acc;
    }
}

/// Same contract as convolve_channel_direct via FFT: the source is
/// replicate-padded by kH-1 x kW-1, both operands are zero-padded to the
/// full linear-convolution size, and the "same" window is cut from the
/// product transform. Agrees with the direct path to ~1e-12.
inline void convolve_channel_fft(const double* src, int h, int w, const double* k,
                                 int kh, int kw, double* out) {
  const int cy = kh / 2, cx = kw / 2;
  const int pad_t = kh - 1 - cy, pad_l = kw - 1 - cx;
  const int hp = h + kh - 1, wp = w + kw - 1;
  const int fh = hp + kh - 1, fw = wp + kw - 1;
  const int fcw = fw / 2 + 1;
  const auto& plans = detail::fft_plans(fh, fw);

  using Real = std::unique_ptr<double[], detail::FftwDeleter>;
  using Cplx = std::unique_ptr<fftw_complex[], detail::FftwDeleter>;
  const size_t rn = static_cast<size_t>(fh) * fw, cn = static_cast<size_t>(fh) * fcw;
  Real a(fftw_alloc_real(rn)), b(fftw_alloc_real(rn));
  Cplx fa(fftw_alloc_complex(cn)), fb(fftw_alloc_complex(cn));

  std::fill_n(a.get(), rn, 0.0);
  for (int y = 0; y < hp; ++y) {
    const int sy = std::clamp(y - pad_t, 0, h - 1);
    double* dst = a.get() + static_cast<size_t>(y) * fw;
    const double* srow = src + static_cast<size_t>(sy) * w;
    for (int x = 0; x < wp; ++x) dst[x] = srow[std::clamp(x - pad_l, 0, w - 1)];
  }
  std::fill_n(b.get(), rn, 0.0);
  for (int u = 0; u < kh; ++u)
    std::copy_n(k + static_cast<size_t>(u) * kw, kw, b.get() + static_cast<size_t>(u) * fw);

  fftw_execute_dft_r2c(plans.fwd, a.get(), fa.get());
  fftw_execute_dft_r2c(plans.fwd, b.get(), fb.get());
  const double inv = 1.0 / static_cast<double>(rn);
  for (size_t i = 0; i < cn; ++i) {
    const double re = fa[i][0] * fb[i][0] - fa[i][1] * fb[i][1];
    const double im = fa[i][0] * fb[i][1] + fa[i][1] * fb[i][0];
    fa[i][0] = re * inv;
    fa[i][1] = im * inv;
  }
  fftw_execute_dft_c2r(plans.inv, fa.get(), a.get());

  for (int y = 0; y < h; ++y) {
    const double* crow = a.get() + (static_cast<size_t>(y) + kh - 1) * fw + (kw - 1);
    std::copy_n(crow, w, out + static_cast<size_t>(y) * w);
  }
}

/// Production path: FFT once the work of the direct loop gets heavy,
/// direct loop otherwise. Both paths satisfy the same contract.
inline void convolve_channel(const double* src, int h, int w, const double* k, int kh,
                             int kw, double* out) {
  const std::int64_t direct_cost =
      static_cast<std::int64_t>(h) * w * kh * kw;
  if (direct_cost >= (std::int64_t{1} << 22))
    convolve_channel_fft(src, h, w, k, kh, kw, out);
  else
    convolve_channel_direct(src, h, w, k, kh, kw, out);
}

/// Forward degradation: per-channel convolution with the blur kernel plus
/// i.i.d. Gaussian noise, clamped back to [0,1].
inline Image blur(const Image& img, const MotionKernel& k, double noise_sigma, Rng& rng) {
  if (noise_sigma < 0.0) throw ConfigError("blur: noise_sigma must be >= 0");
  if (k.canvas > img.height || k.canvas > img.width)
    throw DegradationError("blur: kernel does not fit inside the image");
  Image out = Image::create(img.height, img.width, img.channels);
  const size_t plane = static_cast<size_t>(img.height) * img.width;
  for (int c = 0; c < img.channels; ++c)
    convolve_channel(img.data.data() + c * plane, img.height, img.width,
                     k.weights.data(), k.canvas, k.canvas, out.data.data() + c * plane);
  if (noise_sigma > 0.0)
    for (double& v : out.data) v += noise_sigma * rng.normal();
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// Peak signal-to-noise ratio in dB on the [0,1] scale; +infinity for
/// identical images.
inline double psnr(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw DimensionError("psnr: image shapes differ");
  double se = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.data.size());
  return 10.0 * std::log10(1.0 / mse);
}

/// Image batch as a [N,C,H,W] tensor; all images must share one shape.
inline Tensor to_tensor(const std::vector<Image>& batch) {
  if (batch.empty()) throw DimensionError("to_tensor: empty batch");
  const Image& first = batch.front();
  Tensor t = Tensor::zeros({static_cast<int64_t>(batch.size()), first.channels,
                            first.height, first.width});
  auto& tv = t.mutable_data();
  const size_t stride = first.data.size();
  for (size_t n = 0; n < batch.size(); ++n) {
    const Image& img = batch[n];
    if (img.height != first.height || img.width != first.width ||
        img.channels != first.channels)
      throw DimensionError("to_tensor: images in a batch must share a shape");
    std::copy(img.data.begin(), img.data.end(), tv.begin() + n * stride);
  }
  return t;
}

inline Tensor to_tensor(const Image& img) { return to_tensor(std::vector<Image>{img}); }

/// One batch element back as an image, clamped to [0,1].
inline Image to_image(const Tensor& t, int64_t batch_index = 0) {
  if (t.rank() != 4) throw DimensionError("to_image: rank-4 tensor required");
  if (batch_index < 0 || batch_index >= t.dim(0))
    throw DimensionError("to_image: batch index out of range");
  const int channels = static_cast<int>(t.dim(1));
  if (channels != 1 && channels != 3)
    throw DimensionError("to_image: tensor must have 1 or 3 channels");
  Image img = Image::create(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)),
                            channels);
  const size_t stride = img.data.size();
  const double* src = t.data().data() + static_cast<size_t>(batch_index) * stride;
  for (size_t i = 0; i < stride; ++i) img.data[i] = std::clamp(src[i], 0.0, 1.0);
  return img;
}

}  // namespace deepdeblur
