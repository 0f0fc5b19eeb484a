#include <catch2/catch_amalgamated.hpp>

#include <png.h>

#include <cmath>
#include <vector>

#include <deepdeblur/imaging.hpp>

#include "support/tempdir.hpp"

using namespace deepdeblur;

namespace {

Image random_image(int h, int w, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Image img = Image::create(h, w, c);
  for (double& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

// Independent check of the convolution orientation: flip the kernel and run
// plain cross-correlation with replicate borders.
std::vector<double> flipped_xcorr(const std::vector<double>& src, int h, int w,
                                  const std::vector<double>& k, int kh, int kw) {
  std::vector<double> flipped(k.size());
  for (int u = 0; u < kh; ++u)
    for (int v = 0; v < kw; ++v)
      flipped[static_cast<size_t>(u * kw + v)] =
          k[static_cast<size_t>((kh - 1 - u) * kw + (kw - 1 - v))];
  // Cross-correlation anchor for the flipped kernel that matches a
  // convolution centered at (kh/2, kw/2): offset so both agree for odd sizes.
  const int ay = kh - 1 - kh / 2, ax = kw - 1 - kw / 2;
  std::vector<double> out(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int u = 0; u < kh; ++u)
        for (int v = 0; v < kw; ++v) {
          const int sy = std::clamp(y + u - ay, 0, h - 1);
          const int sx = std::clamp(x + v - ax, 0, w - 1);
          acc += flipped[static_cast<size_t>(u * kw + v)] *
                 src[static_cast<size_t>(sy) * w + sx];
        }
      out[static_cast<size_t>(y) * w + x] = acc;
    }
  return out;
}

void write_gray16_png(const std::string& path, int h, int w) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  REQUIRE(fp != nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 2, 0x7f);
  std::vector<png_bytep> rows(static_cast<size_t>(h), row.data());
  REQUIRE(setjmp(png_jmpbuf(png)) == 0);
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

TEST_CASE("png round-trips", "[imaging]") {
  oracles::TempDir tmp;
  Rng rng(21);

  SECTION("rgb image survives an 8-bit round trip") {
    Image img = random_image(13, 17, 3, rng);
    save_png(img, tmp.file("a.png"));
    Image back = load_png(tmp.file("a.png"));
    REQUIRE(back.channels == 3);
    for (size_t i = 0; i < img.data.size(); ++i)
      REQUIRE(std::abs(back.data[i] - img.data[i]) <= 1.0 / 510 + 1e-12);
  }
  SECTION("all-black grayscale image round-trips exactly") {
    Image img = Image::create(5, 7, 1);
    save_png(img, tmp.file("b.png"));
    Image back = load_png(tmp.file("b.png"));
    REQUIRE(back.data == img.data);
  }
  SECTION("16-bit png is rejected") {
    write_gray16_png(tmp.file("deep.png"), 4, 4);
    REQUIRE_THROWS_AS(load_png(tmp.file("deep.png")), IoError);
  }
  SECTION("missing file is rejected") {
    REQUIRE_THROWS_AS(load_png(tmp.file("absent.png")), IoError);
  }
}

TEST_CASE("blur degradation", "[imaging]") {
  Rng rng(33);

  SECTION("delta kernel with zero noise is the identity") {
    Image img = random_image(20, 24, 3, rng);
    MotionKernel delta;
    delta.canvas = 9;
    delta.valid_size = 1;
    delta.weights.assign(81, 0.0);
    delta.weights[4 * 9 + 4] = 1.0;
    Image out = blur(img, delta, 0.0, rng);
    for (size_t i = 0; i < img.data.size(); ++i)
      REQUIRE(out.data[i] == Catch::Approx(img.data[i]).margin(1e-12));
  }
  SECTION("any normalized kernel preserves a constant image") {
    Image img = Image::create(30, 30, 1, 0.42);
    GpConfig cfg;
    cfg.traj_len_max = 300;
    Rng krng(8);
    MotionKernel k = synth_kernel(cfg, krng);
    Image out = blur(img, k, 0.0, rng);
    for (double v : out.data) REQUIRE(v == Catch::Approx(0.42).margin(1e-6));
  }
  SECTION("matches the flipped cross-correlation formulation") {
    Image img = random_image(18, 22, 1, rng, 0.25, 0.75);
    GpConfig cfg;
    cfg.traj_len_max = 300;
    cfg.canvas = 11;
    cfg.valid_size_min = 5;
    cfg.valid_size_max = 9;
    Rng krng(14);
    MotionKernel k = synth_kernel(cfg, krng);
    Image out = blur(img, k, 0.0, rng);
    auto ref = flipped_xcorr(img.data, 18, 22, k.weights, 11, 11);
    for (size_t i = 0; i < ref.size(); ++i)
      REQUIRE(out.data[i] == Catch::Approx(ref[i]).margin(1e-10));
  }
  SECTION("kernel larger than the image is rejected") {
    Image img = Image::create(10, 10, 1, 0.5);
    MotionKernel k;
    k.canvas = 27;
    k.valid_size = 8;
    k.weights.assign(27 * 27, 1.0 / 729);
    REQUIRE_THROWS_AS(blur(img, k, 0.0, rng), DegradationError);
  }
  SECTION("blur is linear away from the clamp") {
    Image a = random_image(16, 16, 1, rng, 0.4, 0.5);
    Image b = random_image(16, 16, 1, rng, 0.4, 0.5);
    GpConfig cfg;
    cfg.traj_len_max = 300;
    cfg.canvas = 9;
    cfg.valid_size_min = 3;
    cfg.valid_size_max = 7;
    Rng krng(2);
    MotionKernel k = synth_kernel(cfg, krng);
    Image mix = Image::create(16, 16, 1);
    for (size_t i = 0; i < mix.data.size(); ++i)
      mix.data[i] = 0.5 * a.data[i] + 0.5 * b.data[i];
    Image ba = blur(a, k, 0.0, rng), bb = blur(b, k, 0.0, rng),
          bm = blur(mix, k, 0.0, rng);
    for (size_t i = 0; i < bm.data.size(); ++i)
      REQUIRE(bm.data[i] ==
              Catch::Approx(0.5 * ba.data[i] + 0.5 * bb.data[i]).margin(1e-10));
  }
  SECTION("noise is reproducible per seed and bounded by the clamp") {
    Image img = Image::create(12, 12, 3, 0.5);
    MotionKernel delta;
    delta.canvas = 3;
    delta.valid_size = 1;
    delta.weights.assign(9, 0.0);
    delta.weights[4] = 1.0;
    Rng r1(77), r2(77);
    Image n1 = blur(img, delta, 0.02, r1);
    Image n2 = blur(img, delta, 0.02, r2);
    REQUIRE(n1.data == n2.data);
    bool changed = false;
    for (size_t i = 0; i < n1.data.size(); ++i) {
      REQUIRE(n1.data[i] >= 0.0);
      REQUIRE(n1.data[i] <= 1.0);
      changed |= n1.data[i] != img.data[i];
    }
    REQUIRE(changed);
  }
}

TEST_CASE("fft and direct convolution agree", "[imaging]") {
  Rng rng(64);
  for (int trial = 0; trial < 5; ++trial) {
    const int h = 16 + static_cast<int>(rng.uniform_int(40));
    const int w = 16 + static_cast<int>(rng.uniform_int(40));
    const int k = 3 + 2 * static_cast<int>(rng.uniform_int(7));
    std::vector<double> src(static_cast<size_t>(h) * w), ker(static_cast<size_t>(k) * k);
    for (double& v : src) v = rng.uniform(-1.0, 1.0);
    for (double& v : ker) v = rng.uniform(-0.5, 0.5);
    std::vector<double> out_d(src.size()), out_f(src.size());
    convolve_channel_direct(src.data(), h, w, ker.data(), k, k, out_d.data());
    convolve_channel_fft(src.data(), h, w, ker.data(), k, k, out_f.data());
    for (size_t i = 0; i < src.size(); ++i)
      REQUIRE(out_f[i] == Catch::Approx(out_d[i]).margin(1e-9));
  }
}

TEST_CASE("psnr", "[imaging]") {
  Rng rng(90);
  SECTION("identical images hit the infinity sentinel") {
    Image img = random_image(8, 8, 3, rng);
    REQUIRE(std::isinf(psnr(img, img)));
  }
  SECTION("uniform 0.1 difference is 20 dB") {
    Image a = Image::create(10, 10, 1, 0.3);
    Image b = Image::create(10, 10, 1, 0.4);
    REQUIRE(psnr(a, b) == Catch::Approx(20.0).epsilon(1e-12));
  }
  SECTION("symmetric") {
    Image a = random_image(9, 11, 3, rng);
    Image b = random_image(9, 11, 3, rng);
    REQUIRE(psnr(a, b) == psnr(b, a));
  }
  SECTION("monotone in noise amplitude") {
    Image base = Image::create(16, 16, 1, 0.5);
    double prev = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.05, 0.1, 0.2}) {
      Image noisy = base;
      Rng nrng(5);
      for (double& v : noisy.data) v = std::clamp(v + amp * (nrng.uniform() - 0.5), 0.0, 1.0);
      const double val = psnr(base, noisy);
      REQUIRE(val < prev);
      prev = val;
    }
  }
  SECTION("shape mismatch is rejected") {
    REQUIRE_THROWS_AS(psnr(Image::create(4, 4, 1), Image::create(4, 5, 1)),
                      DimensionError);
  }
}

TEST_CASE("tensor conversions", "[imaging]") {
  Rng rng(17);
  Image a = random_image(6, 5, 3, rng);
  Image b = random_image(6, 5, 3, rng);
  Tensor t = to_tensor({a, b});
  REQUIRE(t.shape() == std::vector<int64_t>{2, 3, 6, 5});
  Image back = to_image(t, 1);
  REQUIRE(back.data == b.data);

  Tensor wild = Tensor::from_data({1, 1, 1, 2}, {-0.5, 1.5});
  Image clamped = to_image(wild);
  REQUIRE(clamped.data[0] == 0.0);
  REQUIRE(clamped.data[1] == 1.0);
}
