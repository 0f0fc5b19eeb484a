#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/rng.hpp"

namespace deepdeblur {

/// Parameters of the motion-trajectory process and kernel grid.
struct GpConfig {
  double sigma_f2 = 1.0;       // signal variance of the trajectory process
  double length_scale = 0.3;   // smoothness length scale, trajectory time units
  double step = 0.01;          // margin between consecutive time samples
  int traj_len_min = 200;      // inclusive range for the sample count N
  int traj_len_max = 1200;
  int valid_size_min = 8;      // inclusive pixel range for the active extent
  int valid_size_max = 20;
  int canvas = 27;             // fixed output side length, odd
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma_f2 > 0.0)) throw ConfigError("gp.sigma_f2 must be positive");
    if (!(length_scale > 0.0)) throw ConfigError("gp.length_scale must be positive");
    if (!(step > 0.0)) throw ConfigError("gp.step must be positive");
    if (traj_len_min < 1 || traj_len_max < traj_len_min)
      throw ConfigError("gp.traj_len range is invalid");
    if (canvas < 3 || canvas % 2 == 0) throw ConfigError("gp.canvas must be odd and >=3");
    if (valid_size_min < 3 || valid_size_max > canvas || valid_size_max < valid_size_min)
      throw ConfigError("gp.valid_size range must lie within [3, canvas]");
  }
};

/// A normalized blur kernel on a fixed square canvas.
struct MotionKernel {
  int canvas = 0;
  int valid_size = 0;
  std::vector<double> weights;  // canvas*canvas, row-major
};

/// Matern covariance (nu = 5/2) between two trajectory time points.
inline double matern_cov(double t1, double t2, const GpConfig& cfg) {
  const double d = std::abs(t1 - t2);
  const double r = 2.2360679774997896964091736687747 * d / cfg.length_scale;  // sqrt(5)|d|/l
  return cfg.sigma_f2 * (1.0 + r + r * r / 3.0) * std::exp(-r);
}

inline double kernel_sum(const MotionKernel& k) {
  double s = 0.0;
  for (double w : k.weights) s += w;
  return s;
}

/// Center of mass in (x, y) pixel coordinates.
inline std::pair<double, double> kernel_center_of_mass(const MotionKernel& k) {
  double s = 0.0, sx = 0.0, sy = 0.0;
  for (int y = 0; y < k.canvas; ++y)
    for (int x = 0; x < k.canvas; ++x) {
      const double w = k.weights[static_cast<size_t>(y * k.canvas + x)];
      s += w;
      sx += w * x;
      sy += w * y;
    }
  if (s <= 0.0) throw SynthesisError("center of mass of a zero-mass kernel");
  return {sx / s, sy / s};
}

namespace detail {

/// Cached Cholesky factor of the trajectory covariance on the uniform grid
/// t_i = i*step, built once per (sigma_f2, length_scale, step, n_max). The
/// factor of any leading principal submatrix is the leading block of this
/// factor, so one decomposition serves every trajectory length up to n_max.
inline std::shared_ptr<const Eigen::MatrixXd> trajectory_factor(const GpConfig& cfg) {
  using Key = std::tuple<double, double, double, int>;
  static std::mutex mu;
  static std::map<Key, std::shared_ptr<const Eigen::MatrixXd>> cache;
  const Key key{cfg.sigma_f2, cfg.length_scale, cfg.step, cfg.traj_len_max};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  const int n = cfg.traj_len_max;
  Eigen::MatrixXd cov(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j)
      cov(i, j) = cov(j, i) = matern_cov(i * cfg.step, j * cfg.step, cfg);

  for (double jitter = 1e-10; jitter <= 1e-6 * 1.0000001; jitter *= 10.0) {
    Eigen::MatrixXd attempt = cov;
    attempt.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(attempt);
    if (llt.info() == Eigen::Success) {
      auto factor = std::make_shared<const Eigen::MatrixXd>(llt.matrixL());
      cache[key] = factor;
      return factor;
    }
  }
  throw SynthesisError("trajectory covariance is not positive definite at max jitter");
}

/// Deposits each point onto the grid by bilinear splatting; every splat
/// distributes exactly unit mass. Coordinates are clamped to the canvas, so
/// off-grid points pile up on the border instead of losing mass.
inline void splat_points(const std::vector<std::pair<double, double>>& pts, int canvas,
                         std::vector<double>& grid) {
  for (const auto& [px, py] : pts) {
    const int64_t ix = std::clamp<int64_t>(static_cast<int64_t>(std::floor(px)), 0,
                                           canvas - 2);
    const int64_t iy = std::clamp<int64_t>(static_cast<int64_t>(std::floor(py)), 0,
                                           canvas - 2);
    const double fx = std::clamp(px - static_cast<double>(ix), 0.0, 1.0);
    const double fy = std::clamp(py - static_cast<double>(iy), 0.0, 1.0);
    double* row = grid.data() + iy * canvas + ix;
    row[0] += (1.0 - fx) * (1.0 - fy);
    row[1] += fx * (1.0 - fy);
    row[canvas] += (1.0 - fx) * fy;
    row[canvas + 1] += fx * fy;
  }
}

}  // namespace detail

/// Draws one 2D camera trajectory: N sampled from the configured range,
/// then two independent process draws (x and y) on the grid t_i = i*step.
inline std::vector<std::pair<double, double>> sample_trajectory(const GpConfig& cfg,
                                                                Rng& rng) {
  cfg.validate();
  const int span = cfg.traj_len_max - cfg.traj_len_min + 1;
  const int n = cfg.traj_len_min +
                static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span)));
  auto factor = detail::trajectory_factor(cfg);

  Eigen::VectorXd zx(n), zy(n);
  for (int i = 0; i < n; ++i) zx(i) = rng.normal();
  for (int i = 0; i < n; ++i) zy(i) = rng.normal();
  const auto block = factor->topLeftCorner(n, n).triangularView<Eigen::Lower>();
  const Eigen::VectorXd xs = block * zx;
  const Eigen::VectorXd ys = block * zy;

  std::vector<std::pair<double, double>> traj(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) traj[static_cast<size_t>(i)] = {xs(i), ys(i)};
  return traj;
}

/// Rescales the trajectory so its bounding box fits a valid_size x valid_size
/// region centered on the canvas, then splats the points bilinearly. A
/// degenerate (zero-extent) trajectory deposits all its mass at the center.
inline std::vector<double> rasterize(const std::vector<std::pair<double, double>>& traj,
                                     int valid_size, int canvas) {
  if (traj.empty()) throw SynthesisError("rasterize: empty trajectory");
  std::vector<double> grid(static_cast<size_t>(canvas) * canvas, 0.0);
  const double center = (canvas - 1) / 2.0;

  double min_x = traj[0].first, max_x = traj[0].first;
  double min_y = traj[0].second, max_y = traj[0].second;
  for (const auto& [x, y] : traj) {
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  const double extent = std::max(max_x - min_x, max_y - min_y);

  if (extent < 1e-12) {
    grid[static_cast<size_t>(canvas / 2 * canvas + canvas / 2)] +=
        static_cast<double>(traj.size());
    return grid;
  }

  // Uniform scale: the longer bbox side spans valid_size pixels.
  const double s = (valid_size - 1) / extent;
  const double cx = (min_x + max_x) / 2.0, cy = (min_y + max_y) / 2.0;
  std::vector<std::pair<double, double>> pts;
  pts.reserve(traj.size());
  for (const auto& [x, y] : traj)
    pts.emplace_back((x - cx) * s + center, (y - cy) * s + center);
  detail::splat_points(pts, canvas, grid);
  return grid;
}

/// Shifts the grid's center of mass onto the canvas center by whole-pixel
/// translation (re-measured after each shift, since clipped borders move the
/// mass center), then normalizes to unit sum.
inline MotionKernel center_and_normalize(std::vector<double> grid, int canvas,
                                         int valid_size) {
  const double center = (canvas - 1) / 2.0;
  auto measure = [&](double& total, double& cx, double& cy) {
    total = cx = cy = 0.0;
    for (int y = 0; y < canvas; ++y)
      for (int x = 0; x < canvas; ++x) {
        const double w = grid[static_cast<size_t>(y * canvas + x)];
        total += w;
        cx += w * x;
        cy += w * y;
      }
    if (total <= 0.0) throw SynthesisError("center_and_normalize: zero-mass grid");
    cx /= total;
    cy /= total;
  };

  double total, cx, cy;
  bool centered = false;
  for (int iter = 0; iter < 16 && !centered; ++iter) {
    measure(total, cx, cy);
    const int dx = static_cast<int>(std::lround(center - cx));
    const int dy = static_cast<int>(std::lround(center - cy));
    if (dx == 0 && dy == 0) {
      centered = true;
      break;
    }
    std::vector<double> shifted(grid.size(), 0.0);
    for (int y = 0; y < canvas; ++y) {
      const int ny = y + dy;
      if (ny < 0 || ny >= canvas) continue;
      for (int x = 0; x < canvas; ++x) {
        const int nx = x + dx;
        if (nx < 0 || nx >= canvas) continue;
        shifted[static_cast<size_t>(ny * canvas + nx)] =
            grid[static_cast<size_t>(y * canvas + x)];
      }
    }
    grid = std::move(shifted);
  }
  if (!centered) throw SynthesisError("center_and_normalize: centering did not converge");

  MotionKernel k;
  k.canvas = canvas;
  k.valid_size = valid_size;
  k.weights = std::move(grid);
  const double inv = 1.0 / total;
  for (double& w : k.weights) w *= inv;
  return k;
}

/// Full synthesis: trajectory draw, uniform valid-size draw, rasterize,
/// center, normalize. Deterministic per (cfg, rng state).
inline MotionKernel synth_kernel(const GpConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto traj = sample_trajectory(cfg, rng);
  const int span = cfg.valid_size_max - cfg.valid_size_min + 1;
  const int valid_size = cfg.valid_size_min +
                         static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span)));
  return center_and_normalize(rasterize(traj, valid_size, cfg.canvas), cfg.canvas,
                              valid_size);
}

/// Straight motion streak: a segment of the given pixel length through the
/// canvas center at the given angle (degrees; 0 = horizontal, 90 = vertical).
inline MotionKernel linear_kernel(double length_px, double angle_deg, int canvas = 27) {
  if (!(length_px > 0.0) || length_px > canvas)
    throw ConfigError("linear_kernel: length must lie in (0, canvas]");
  if (canvas < 3) throw ConfigError("linear_kernel: canvas too small");
  const double center = (canvas - 1) / 2.0;
  const double theta = angle_deg * 3.1415926535897932384626433832795 / 180.0;
  const double dx = std::cos(theta), dy = std::sin(theta);
  // Endpoints at +-(L-1)/2 so the streak touches about L pixels end to end.
  const double half = (length_px - 1.0) / 2.0;
  const int steps = std::max(2, static_cast<int>(std::ceil(length_px * 16)));
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double t = -half + (2.0 * half) * i / (steps - 1);
    pts.emplace_back(center + t * dx, center + t * dy);
  }
  std::vector<double> grid(static_cast<size_t>(canvas) * canvas, 0.0);
  if (half < 1e-12) {
    grid[static_cast<size_t>(canvas / 2 * canvas + canvas / 2)] = 1.0;
  } else {
    detail::splat_points(pts, canvas, grid);
  }
  return center_and_normalize(std::move(grid), canvas,
                              std::min(canvas, static_cast<int>(std::ceil(length_px))));
}

/// Writes the MKERN text format: `MKERN 1 <canvas> <valid_size>` then
/// canvas rows of canvas decimals at full round-trip precision.
inline void save_kernel(const MotionKernel& k, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_kernel: cannot open " + path);
  out << "MKERN 1 " << k.canvas << ' ' << k.valid_size << '\n';
  char buf[32];
  for (int y = 0; y < k.canvas; ++y) {
    for (int x = 0; x < k.canvas; ++x) {
      std::snprintf(buf, sizeof buf, "%.17g", k.weights[static_cast<size_t>(y * k.canvas + x)]);
      out << buf << (x + 1 == k.canvas ? "" : " ");
    }
    out << '\n';
  }
  if (!out) throw IoError("save_kernel: write failed for " + path);
}

inline MotionKernel load_kernel(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_kernel: cannot open " + path);
  std::string magic;
  int version = 0, canvas = 0, valid_size = 0;
  if (!(in >> magic >> version >> canvas >> valid_size) || magic != "MKERN")
    throw ParseError("load_kernel: malformed header in " + path);
  if (version != 1) throw ParseError("load_kernel: unsupported version in " + path);
  if (canvas < 1 || valid_size < 1 || valid_size > canvas)
    throw ParseError("load_kernel: invalid dimensions in " + path);

  MotionKernel k;
  k.canvas = canvas;
  k.valid_size = valid_size;
  k.weights.resize(static_cast<size_t>(canvas) * canvas);
  double sum = 0.0;
  for (double& w : k.weights) {
    if (!(in >> w)) throw ParseError("load_kernel: truncated payload in " + path);
    if (!(w >= 0.0) || !std::isfinite(w))
      throw ParseError("load_kernel: negative or non-finite weight in " + path);
    sum += w;
  }
  std::string tail;
  if (in >> tail) throw ParseError("load_kernel: trailing content in " + path);

  if (std::abs(sum - 1.0) > 1e-9) {
    if (std::abs(sum - 1.0) > 1e-3 || sum <= 0.0)
      throw ParseError("load_kernel: weights do not sum to 1 in " + path);
    std::fprintf(stderr, "warning: %s sums to %.6f; renormalizing\n", path.c_str(), sum);
    for (double& w : k.weights) w /= sum;
  }
  return k;
}

}  // namespace deepdeblur
