#include <CLI11.hpp>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "deepdeblur/deepdeblur.hpp"

namespace dd = deepdeblur;
namespace fs = std::filesystem;

namespace {

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void apply_threads(int threads) {
  if (threads < 1) throw dd::ConfigError("--threads must be >= 1");
  Eigen::setNbThreads(threads);
}

void print_header(const char* subcommand) {
  std::printf("resolved config (%s):\n", subcommand);
}

void print_kv(const char* key, const std::string& value) {
  std::printf("  %s = %s\n", key, value.c_str());
}

void print_kv(const char* key, long long value) { print_kv(key, std::to_string(value)); }

void print_kv(const char* key, double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", value);
  print_kv(key, std::string(buf));
}

/// Contact sheet of kernels, each tile max-normalized, 1px white separators.
dd::Image kernel_sheet(const std::vector<dd::MotionKernel>& kernels) {
  const int n = static_cast<int>(kernels.size());
  const int canvas = kernels[0].canvas;
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  dd::Image sheet =
      dd::Image::create(rows * (canvas + 1) - 1, cols * (canvas + 1) - 1, 1, 1.0);
  for (int i = 0; i < n; ++i) {
    const dd::MotionKernel& k = kernels[static_cast<size_t>(i)];
    double peak = 0.0;
    for (double w : k.weights) peak = std::max(peak, w);
    const int oy = (i / cols) * (canvas + 1);
    const int ox = (i % cols) * (canvas + 1);
    for (int y = 0; y < canvas; ++y)
      for (int x = 0; x < canvas; ++x)
        sheet.at(0, oy + y, ox + x) =
            peak > 0.0 ? k.weights[static_cast<size_t>(y * canvas + x)] / peak : 0.0;
  }
  return sheet;
}

void run_synth_kernels(int count, const std::string& out, std::uint64_t seed, int canvas,
                       int valid_min, int valid_max, bool preview, int threads) {
  apply_threads(threads);
  if (count < 1) throw dd::ConfigError("--count must be >= 1");
  dd::GpConfig gp;
  gp.canvas = canvas;
  gp.valid_size_min = valid_min;
  gp.valid_size_max = valid_max;
  gp.validate();

  print_header("synth-kernels");
  print_kv("count", static_cast<long long>(count));
  print_kv("out", out);
  print_kv("seed", static_cast<long long>(seed));
  print_kv("gp.canvas", static_cast<long long>(gp.canvas));
  print_kv("gp.valid_size_min", static_cast<long long>(gp.valid_size_min));
  print_kv("gp.valid_size_max", static_cast<long long>(gp.valid_size_max));
  print_kv("preview", std::string(preview ? "true" : "false"));
  print_kv("threads", static_cast<long long>(threads));

  fs::create_directories(out);
  std::vector<dd::MotionKernel> kernels(static_cast<size_t>(count));

  // Kernel i draws from its own stream, so the output is independent of the
  // thread count.
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&](int first) {
    try {
      for (int i = first; i < count; i += threads) {
        dd::Rng rng = dd::Rng::stream(
            seed, dd::stream_id(dd::stream_tag::kKernel, 0, static_cast<std::uint64_t>(i)));
        kernels[static_cast<size_t>(i)] = dd::synth_kernel(gp, rng);
        char name[32];
        std::snprintf(name, sizeof name, "kernel_%04d.mkern", i);
        dd::save_kernel(kernels[static_cast<size_t>(i)], (fs::path(out) / name).string());
      }
    } catch (...) {
      const std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  if (preview) {
    const std::string sheet_path = (fs::path(out) / "preview.png").string();
    dd::save_png(kernel_sheet(kernels), sheet_path);
    std::printf("wrote %s\n", sheet_path.c_str());
  }
  std::printf("wrote %d kernel files to %s\n", count, out.c_str());
}

void run_blur(const std::string& in, const std::string& kernel_path,
              const std::string& out, double noise, std::uint64_t seed) {
  print_header("blur");
  print_kv("in", in);
  print_kv("kernel", kernel_path);
  print_kv("out", out);
  print_kv("noise_sigma", noise);
  print_kv("seed", static_cast<long long>(seed));

  const dd::Image img = dd::load_png(in);
  const dd::MotionKernel kernel = dd::load_kernel(kernel_path);
  dd::Rng rng = dd::Rng::stream(seed, dd::stream_id(dd::stream_tag::kNoise, 0, 0));
  dd::save_png(dd::blur(img, kernel, noise, rng), out);
  std::printf("wrote %s\n", out.c_str());
}

void run_train(const std::string& data, const std::string& config_path,
               const std::string& out, const std::string& resume, bool has_max_steps,
               std::int64_t max_steps, bool has_seed, std::uint64_t seed) {
  dd::FullConfig full;
  if (!config_path.empty()) full = dd::parse_config_file(config_path);
  if (has_max_steps) full.train.max_steps = max_steps;
  if (has_seed) full.train.seed = seed;
  full.train.validate();
  full.net.validate();

  print_header("train");
  std::fputs(dd::write_config_text(full).c_str(), stdout);
  print_kv("data", data);
  print_kv("out", out);
  if (!resume.empty()) print_kv("resume", resume);

  dd::DeepDeblurNet net = dd::DeepDeblurNet::init(full.net, full.train.seed);
  const dd::Checkpoint final = dd::train(net, data, full.train, out, resume);
  std::printf("final checkpoint: %s (step %lld)\n",
              (fs::path(out) / "final.ckpt").string().c_str(),
              static_cast<long long>(final.step));
}

void run_deblur(const std::string& ckpt_path, const std::string& in,
                const std::string& out) {
  const dd::Checkpoint ckpt = dd::load_checkpoint(ckpt_path);
  print_header("deblur");
  print_kv("ckpt", ckpt_path);
  print_kv("ckpt.kind", ckpt.kind);
  print_kv("in", in);
  print_kv("out", out);

  const auto restorer = dd::restorer_from_checkpoint(ckpt);
  const dd::Image img = dd::load_png(in);
  dd::save_png(dd::to_image(restorer->restore(dd::to_tensor(img))), out);
  std::printf("wrote %s (%dx%d, %d channels)\n", out.c_str(), img.width, img.height,
              img.channels);
}

std::vector<std::string> list_kernel_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw dd::IoError("kernel directory not found: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".mkern")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw dd::ConfigError("eval: no .mkern files in " + dir);
  return files;
}

void run_eval(const std::string& ckpt_path, const std::string& data,
              const std::string& kernels_dir, const std::string& report_path,
              double noise, std::uint64_t seed, int threads) {
  apply_threads(threads);
  const dd::Checkpoint ckpt = dd::load_checkpoint(ckpt_path);
  print_header("eval");
  print_kv("ckpt", ckpt_path);
  print_kv("ckpt.kind", ckpt.kind);
  print_kv("data", data);
  print_kv("kernels", kernels_dir);
  print_kv("report", report_path);
  print_kv("noise_sigma", noise);
  print_kv("seed", static_cast<long long>(seed));
  print_kv("threads", static_cast<long long>(threads));

  const auto restorer = dd::restorer_from_checkpoint(ckpt);
  const std::vector<std::string> kernel_files = list_kernel_files(kernels_dir);
  const dd::EvalReport report = dd::psnr_sweep(*restorer, data, kernel_files, noise, seed);

  std::ofstream csv(report_path);
  if (!csv) throw dd::IoError("cannot open report file: " + report_path);
  csv << dd::report_csv(report);
  if (!csv.flush()) throw dd::IoError("write failed for report file: " + report_path);
  std::fputs(dd::report_table(report).c_str(), stdout);
  std::printf("wrote %s\n", report_path.c_str());
}

void run_bench(const std::string& ckpt_path, const std::string& in, int reps, int warmup,
               int threads) {
  apply_threads(threads);
  const dd::Checkpoint ckpt = dd::load_checkpoint(ckpt_path);
  print_header("bench");
  print_kv("ckpt", ckpt_path);
  print_kv("ckpt.kind", ckpt.kind);
  print_kv("in", in);
  print_kv("reps", static_cast<long long>(reps));
  print_kv("warmup", static_cast<long long>(warmup));
  print_kv("threads", static_cast<long long>(threads));

  const auto restorer = dd::restorer_from_checkpoint(ckpt);
  const dd::Image img = dd::load_png(in);
  const dd::TimingStats stats = dd::time_inference(*restorer, img, warmup, reps);
  std::printf("inference on %dx%d: mean %.6g s, std %.6g s over %lld reps\n", img.width,
              img.height, stats.mean, stats.std_dev, static_cast<long long>(stats.n));
}

void run_dump_features(const std::string& ckpt_path, const std::string& in, int module,
                       const std::string& out) {
  const dd::Checkpoint ckpt = dd::load_checkpoint(ckpt_path);
  if (ckpt.kind != dd::checkpoint_kind::kNet)
    throw dd::ConfigError("dump-features requires a network checkpoint, got kind '" +
                          ckpt.kind + "'");
  print_header("dump-features");
  print_kv("ckpt", ckpt_path);
  print_kv("in", in);
  print_kv("module", static_cast<long long>(module));
  print_kv("out", out);

  const dd::DeepDeblurNet net = dd::net_from_checkpoint(ckpt);
  const dd::Image img = dd::load_png(in);
  for (const std::string& path : dd::dump_feature_maps(net, img, module, out))
    std::printf("wrote %s\n", path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepdeblur: one-step blind face deblurring pipeline"};
  app.require_subcommand(1);

  // synth-kernels
  auto* synth = app.add_subcommand(
      "synth-kernels", "Sample motion blur kernels from the trajectory process");
  int sk_count = 0;
  std::string sk_out;
  std::uint64_t sk_seed = 0;
  int sk_canvas = 27, sk_valid_min = 8, sk_valid_max = 20;
  bool sk_preview = false;
  int sk_threads = default_threads();
  synth->add_option("--count", sk_count, "number of kernels to write")->required();
  synth->add_option("--out", sk_out, "output directory for MKERN files")->required();
  synth->add_option("--seed", sk_seed, "master seed (gp.seed)");
  synth->add_option("--canvas", sk_canvas, "kernel canvas side, odd (gp.canvas)");
  synth->add_option("--valid-min", sk_valid_min,
                    "smallest active extent in px (gp.valid_size_min)");
  synth->add_option("--valid-max", sk_valid_max,
                    "largest active extent in px (gp.valid_size_max)");
  synth->add_flag("--preview", sk_preview, "also write a tiled preview.png contact sheet");
  synth->add_option("--threads", sk_threads,
                    "worker threads; output is independent of this");
  synth->callback([&] {
    run_synth_kernels(sk_count, sk_out, sk_seed, sk_canvas, sk_valid_min, sk_valid_max,
                      sk_preview, sk_threads);
  });

  // blur
  auto* blur_cmd = app.add_subcommand("blur", "Degrade one image with one kernel");
  std::string bl_in, bl_kernel, bl_out;
  double bl_noise = 0.01;
  std::uint64_t bl_seed = 0;
  blur_cmd->add_option("--in", bl_in, "sharp input PNG")->required();
  blur_cmd->add_option("--kernel", bl_kernel, "MKERN kernel file")->required();
  blur_cmd->add_option("--out", bl_out, "blurry output PNG")->required();
  blur_cmd->add_option("--noise", bl_noise, "additive Gaussian sigma (train.noise_sigma)");
  blur_cmd->add_option("--seed", bl_seed, "noise seed (train.seed)");
  blur_cmd->callback([&] { run_blur(bl_in, bl_kernel, bl_out, bl_noise, bl_seed); });

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the restoration network");
  std::string tr_data, tr_config, tr_out, tr_resume;
  std::int64_t tr_max_steps = 0;
  std::uint64_t tr_seed = 0;
  train_cmd->add_option("--data", tr_data, "directory of sharp training PNGs")->required();
  train_cmd->add_option("--config", tr_config,
                        "key=value config file (train.*, loss.*, gp.*, net.*)");
  train_cmd->add_option("--out", tr_out, "checkpoint + loss-log directory")->required();
  auto* tr_max_opt =
      train_cmd->add_option("--max-steps", tr_max_steps, "override train.max_steps");
  auto* tr_seed_opt = train_cmd->add_option("--seed", tr_seed, "override train.seed");
  train_cmd->add_option("--resume", tr_resume, "checkpoint file to resume from");
  train_cmd->callback([&] {
    run_train(tr_data, tr_config, tr_out, tr_resume, tr_max_opt->count() > 0,
              tr_max_steps, tr_seed_opt->count() > 0, tr_seed);
  });

  // deblur
  auto* deblur_cmd = app.add_subcommand("deblur", "Restore one blurry image");
  std::string db_ckpt, db_in, db_out;
  deblur_cmd->add_option("--ckpt", db_ckpt, "DDBLR1 checkpoint (net or identity-stub)")
      ->required();
  deblur_cmd->add_option("--in", db_in, "blurry input PNG")->required();
  deblur_cmd->add_option("--out", db_out, "restored output PNG")->required();
  deblur_cmd->callback([&] { run_deblur(db_ckpt, db_in, db_out); });

  // eval
  auto* eval_cmd =
      app.add_subcommand("eval", "PSNR sweep of a checkpoint over images x kernels");
  std::string ev_ckpt, ev_data, ev_kernels, ev_report;
  double ev_noise = 0.01;
  std::uint64_t ev_seed = 0;
  int ev_threads = default_threads();
  eval_cmd->add_option("--ckpt", ev_ckpt, "DDBLR1 checkpoint (net or identity-stub)")
      ->required();
  eval_cmd->add_option("--data", ev_data, "directory of sharp PNGs")->required();
  eval_cmd->add_option("--kernels", ev_kernels, "directory of MKERN files")->required();
  eval_cmd->add_option("--report", ev_report, "CSV report output path")->required();
  eval_cmd->add_option("--noise", ev_noise, "additive Gaussian sigma (train.noise_sigma)");
  eval_cmd->add_option("--seed", ev_seed, "noise seed (train.seed)");
  eval_cmd->add_option("--threads", ev_threads, "compute threads for the sweep");
  eval_cmd->callback(
      [&] { run_eval(ev_ckpt, ev_data, ev_kernels, ev_report, ev_noise, ev_seed, ev_threads); });

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Time the forward pass on one image");
  std::string bn_ckpt, bn_in;
  int bn_reps = 10, bn_warmup = 1, bn_threads = 1;
  bench_cmd->add_option("--ckpt", bn_ckpt, "DDBLR1 checkpoint (net or identity-stub)")
      ->required();
  bench_cmd->add_option("--in", bn_in, "input PNG")->required();
  bench_cmd->add_option("--reps", bn_reps, "timed repetitions")->required();
  bench_cmd->add_option("--warmup", bn_warmup, "untimed warmup repetitions");
  bench_cmd->add_option("--threads", bn_threads, "compute threads (timing defaults to 1)");
  bench_cmd->callback([&] { run_bench(bn_ckpt, bn_in, bn_reps, bn_warmup, bn_threads); });

  // dump-features
  auto* dump_cmd = app.add_subcommand(
      "dump-features", "Write per-scale feature map sheets entering one module");
  std::string df_ckpt, df_in, df_out;
  int df_module = 0;
  dump_cmd->add_option("--ckpt", df_ckpt, "DDBLR1 network checkpoint")->required();
  dump_cmd->add_option("--in", df_in, "input PNG")->required();
  dump_cmd->add_option("--module", df_module, "module index the maps feed into")
      ->required();
  dump_cmd->add_option("--out", df_out, "output directory for PNG sheets")->required();
  dump_cmd->callback([&] { run_dump_features(df_ckpt, df_in, df_module, df_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const dd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
