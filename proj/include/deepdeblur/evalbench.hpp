#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/imaging.hpp"
#include "deepdeblur/kernels.hpp"
#include "deepdeblur/model.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"
#include "deepdeblur/training.hpp"

namespace deepdeblur {

/// Image-batch restorer: the trained network and the identity stub (used to
/// calibrate the harness) both sit behind this.
class Restorer {
 public:
  virtual ~Restorer() = default;
  virtual Tensor restore(const Tensor& batch) const = 0;
};

class NetRestorer final : public Restorer {
 public:
  explicit NetRestorer(DeepDeblurNet net) : net_(std::move(net)) {}
  Tensor restore(const Tensor& batch) const override { return net_.forward(batch); }
  const DeepDeblurNet& net() const { return net_; }

 private:
  DeepDeblurNet net_;
};

class IdentityRestorer final : public Restorer {
 public:
  Tensor restore(const Tensor& batch) const override { return batch; }
};

inline std::unique_ptr<Restorer> restorer_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind == checkpoint_kind::kIdentityStub)
    return std::make_unique<IdentityRestorer>();
  if (ckpt.kind == checkpoint_kind::kNet)
    return std::make_unique<NetRestorer>(net_from_checkpoint(ckpt));
  throw ConfigError("checkpoint kind '" + ckpt.kind + "' cannot restore images");
}

/// One kernel's sweep results. PSNR means skip +inf sentinel pairs (perfect
/// reconstructions), counting them instead; a mean over zero finite entries
/// is itself reported as +inf.
struct EvalRow {
  std::string kernel_id;
  double blurry_psnr = 0.0;
  double restored_psnr = 0.0;
  std::int64_t image_count = 0;
  std::int64_t excluded_blurry = 0;
  std::int64_t excluded_restored = 0;
};

struct TimingStats {
  double mean = 0.0;
  double std_dev = 0.0;
  std::int64_t n = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double overall_blurry = 0.0;
  double overall_restored = 0.0;
  std::int64_t excluded_total = 0;
  TimingStats timing;  // n == 0 until a timing run is attached
};

namespace detail {

/// Evaluation inputs: sorted PNG listing, any geometry accepted.
inline std::vector<std::pair<std::string, Image>> load_eval_images(
    const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("image directory not found: " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png") paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ConfigError("eval: no PNG images in " + dir);
  std::vector<std::pair<std::string, Image>> images;
  images.reserve(paths.size());
  for (const std::string& p : paths)
    images.emplace_back(fs::path(p).filename().string(), load_png(p));
  return images;
}

inline double mean_or_inf(double sum, std::int64_t n) {
  return n > 0 ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

inline std::string format_psnr(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace detail

/// Degrades every image with every kernel, restores, and tallies both PSNRs.
/// Noise for pair (kernel k, image i) comes from a stream keyed by (seed, k,
/// i), so the report is a pure function of its inputs.
inline EvalReport psnr_sweep(const Restorer& restorer, const std::string& image_dir,
                             const std::vector<std::string>& kernel_files,
                             double noise_sigma, std::uint64_t seed) {
  if (kernel_files.empty()) throw ConfigError("eval: kernel list is empty");
  const auto images = detail::load_eval_images(image_dir);

  EvalReport report;
  double all_bsum = 0.0, all_rsum = 0.0;
  std::int64_t all_bn = 0, all_rn = 0;
  for (size_t k = 0; k < kernel_files.size(); ++k) {
    const MotionKernel kernel = load_kernel(kernel_files[k]);
    EvalRow row;
    row.kernel_id = std::filesystem::path(kernel_files[k]).filename().string();
    double bsum = 0.0, rsum = 0.0;
    std::int64_t bn = 0, rn = 0;
    for (size_t i = 0; i < images.size(); ++i) {
      Rng rng = Rng::stream(seed, stream_id(stream_tag::kNoise, k, i));
      const Image& sharp = images[i].second;
      const Image blurry = blur(sharp, kernel, noise_sigma, rng);
      const Image restored = to_image(restorer.restore(to_tensor(blurry)));
      const double bp = psnr(blurry, sharp);
      const double rp = psnr(restored, sharp);
      ++row.image_count;
      if (std::isfinite(bp)) {
        bsum += bp;
        ++bn;
      } else {
        ++row.excluded_blurry;
      }
      if (std::isfinite(rp)) {
        rsum += rp;
        ++rn;
      } else {
        ++row.excluded_restored;
      }
    }
    row.blurry_psnr = detail::mean_or_inf(bsum, bn);
    row.restored_psnr = detail::mean_or_inf(rsum, rn);
    report.excluded_total += row.excluded_blurry + row.excluded_restored;
    all_bsum += bsum;
    all_rsum += rsum;
    all_bn += bn;
    all_rn += rn;
    report.rows.push_back(std::move(row));
  }
  report.overall_blurry = detail::mean_or_inf(all_bsum, all_bn);
  report.overall_restored = detail::mean_or_inf(all_rsum, all_rn);
  return report;
}

inline EvalReport psnr_sweep(const DeepDeblurNet& net, const std::string& image_dir,
                             const std::vector<std::string>& kernel_files,
                             double noise_sigma, std::uint64_t seed) {
  return psnr_sweep(NetRestorer(net), image_dir, kernel_files, noise_sigma, seed);
}

/// Wall-clock statistics of the restore call alone (no IO, no PSNR), after
/// `warmup` discarded runs. Population std, so reps=1 reports 0.
inline TimingStats time_inference(const Restorer& restorer, const Image& img, int warmup,
                                  int reps) {
  if (reps < 1) throw ConfigError("bench: reps must be >= 1");
  if (warmup < 0) throw ConfigError("bench: warmup must be >= 0");
  const Tensor input = to_tensor(img);
  for (int i = 0; i < warmup; ++i) restorer.restore(input);
  std::vector<double> seconds;
  seconds.reserve(static_cast<size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    restorer.restore(input);
    const auto t1 = std::chrono::steady_clock::now();
    seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  TimingStats stats;
  stats.n = reps;
  for (double s : seconds) stats.mean += s;
  stats.mean /= static_cast<double>(reps);
  double var = 0.0;
  for (double s : seconds) var += (s - stats.mean) * (s - stats.mean);
  stats.std_dev = std::sqrt(var / static_cast<double>(reps));
  return stats;
}

inline TimingStats time_inference(const DeepDeblurNet& net, const Image& img, int warmup,
                                  int reps) {
  return time_inference(NetRestorer(net), img, warmup, reps);
}

/// Paired ablation run: both topologies trained from scratch with identical
/// seeds, data, and budget, then swept over the same kernels.
struct AblationReport {
  NetworkConfig config_a;
  NetworkConfig config_b;
  std::int64_t params_a = 0;
  std::int64_t params_b = 0;
  EvalReport report_a;
  EvalReport report_b;
};

inline AblationReport ablation_compare(const std::string& image_dir,
                                       const std::vector<std::string>& kernel_files,
                                       const NetworkConfig& cfg_a,
                                       const NetworkConfig& cfg_b, const TrainConfig& tc,
                                       const std::string& work_dir) {
  NetworkConfig a_like_b = cfg_a;
  a_like_b.pointwise_reduction = cfg_b.pointwise_reduction;
  if (!(a_like_b == cfg_b))
    throw ConfigError("ablation: configs may differ only in pointwise_reduction");

  AblationReport out;
  out.config_a = cfg_a;
  out.config_b = cfg_b;
  out.params_a = parameter_count(cfg_a);
  out.params_b = parameter_count(cfg_b);

  DeepDeblurNet net_a = DeepDeblurNet::init(cfg_a, tc.seed);
  train(net_a, image_dir, tc, (std::filesystem::path(work_dir) / "a").string());
  out.report_a = psnr_sweep(net_a, image_dir, kernel_files, tc.noise_sigma, tc.seed);

  DeepDeblurNet net_b = DeepDeblurNet::init(cfg_b, tc.seed);
  train(net_b, image_dir, tc, (std::filesystem::path(work_dir) / "b").string());
  out.report_b = psnr_sweep(net_b, image_dir, kernel_files, tc.noise_sigma, tc.seed);
  return out;
}

/// CSV form: one row per kernel, an overall row, and a timing section when a
/// timing run is attached.
inline std::string report_csv(const EvalReport& report) {
  std::string out = "kernel,images,blurry_psnr,restored_psnr,excluded_blurry,excluded_restored\n";
  for (const EvalRow& r : report.rows) {
    out += r.kernel_id + ',' + std::to_string(r.image_count) + ',' +
           detail::format_psnr(r.blurry_psnr) + ',' + detail::format_psnr(r.restored_psnr) +
           ',' + std::to_string(r.excluded_blurry) + ',' +
           std::to_string(r.excluded_restored) + "\n";
  }
  out += "overall,," + detail::format_psnr(report.overall_blurry) + ',' +
         detail::format_psnr(report.overall_restored) + ",," +
         std::to_string(report.excluded_total) + "\n";
  if (report.timing.n > 0) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "timing_seconds,%lld,%.6g,%.6g,,\n",
                  static_cast<long long>(report.timing.n), report.timing.mean,
                  report.timing.std_dev);
    out += buf;
  }
  return out;
}

/// Human-oriented aligned table of the same numbers.
inline std::string report_table(const EvalReport& report) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %7s %12s %14s %9s\n", "kernel", "images",
                "blurry dB", "restored dB", "excluded");
  out += buf;
  auto line = [&](const std::string& id, std::int64_t images, double b, double r,
                  std::int64_t excl) {
    std::snprintf(buf, sizeof buf, "%-24s %7lld %12s %14s %9lld\n", id.c_str(),
                  static_cast<long long>(images), detail::format_psnr(b).c_str(),
                  detail::format_psnr(r).c_str(), static_cast<long long>(excl));
    out += buf;
  };
  std::int64_t total_images = 0;
  for (const EvalRow& r : report.rows) {
    line(r.kernel_id, r.image_count, r.blurry_psnr, r.restored_psnr,
         r.excluded_blurry + r.excluded_restored);
    total_images += r.image_count;
  }
  line("overall", total_images, report.overall_blurry, report.overall_restored,
       report.excluded_total);
  if (report.timing.n > 0) {
    std::snprintf(buf, sizeof buf, "inference: mean %.6g s, std %.6g s over %lld reps\n",
                  report.timing.mean, report.timing.std_dev,
                  static_cast<long long>(report.timing.n));
    out += buf;
  }
  return out;
}

}  // namespace deepdeblur
