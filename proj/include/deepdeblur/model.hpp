#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/imaging.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"

namespace deepdeblur {

/// Restoration network topology. The default is the full-scale layout:
/// a 3x3 stem to 64 channels, six multi-scale modules (kernel sizes 1..14)
/// with channel-halving 1x1 reductions and residual connections, and a 1x1
/// projection back to RGB.
struct NetworkConfig {
  int num_modules = 6;
  int base_channels = 64;
  std::vector<int> scales{1, 3, 5, 7, 14};
  double leaky_slope = 0.01;
  bool pointwise_reduction = true;  // off reproduces the ablated topology
  int in_channels = 3;
  int out_channels = 3;

  void validate() const {
    if (num_modules < 1) throw ConfigError("net.num_modules must be >= 1");
    if (base_channels < 2) throw ConfigError("net.base_channels must be >= 2");
    if (pointwise_reduction && base_channels % 2 != 0)
      throw ConfigError("net.base_channels must be even with pointwise reduction");
    if (scales.empty()) throw ConfigError("net.scales must be non-empty");
    for (int s : scales)
      if (s < 1) throw ConfigError("net.scales entries must be >= 1");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
      throw ConfigError("net.leaky_slope must lie in (0,1)");
    if (in_channels < 1 || out_channels < 1)
      throw ConfigError("net channel counts must be >= 1");
  }

  int branch_channels() const { return base_channels / 2; }
  int max_scale() const { return *std::max_element(scales.begin(), scales.end()); }

  bool operator==(const NetworkConfig&) const = default;
};

/// Closed-form number of weights for a topology; init() audits its actual
/// allocation against this.
inline int64_t parameter_count(const NetworkConfig& cfg) {
  cfg.validate();
  const int64_t base = cfg.base_channels, half = cfg.branch_channels();
  const int64_t n_scales = static_cast<int64_t>(cfg.scales.size());
  int64_t per_module = base * half * n_scales;  // merge 1x1
  for (int s : cfg.scales) {
    const int64_t s2 = static_cast<int64_t>(s) * s;
    if (cfg.pointwise_reduction)
      per_module += half * base + half * half * s2;  // reduce 1x1 + branch conv
    else
      per_module += half * base * s2;  // branch conv straight off base channels
  }
  return base * cfg.in_channels * 9 + cfg.num_modules * per_module +
         static_cast<int64_t>(cfg.out_channels) * base;
}

struct Param {
  std::string name;
  Tensor value;
};

class DeepDeblurNet {
 public:
  /// Builds a network with fan-in-scaled uniform weights, one independent
  /// stream per parameter so the draw is a pure function of (config, seed).
  static DeepDeblurNet init(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DeepDeblurNet net;
    net.cfg_ = cfg;
    const int64_t base = cfg.base_channels, half = cfg.branch_channels();

    auto push = [&net, seed](const std::string& name, std::vector<int64_t> shape) {
      const int64_t fan_in = shape[1] * shape[2] * shape[3];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Rng rng = Rng::stream(seed, stream_id(stream_tag::kInit, 0,
                                            static_cast<std::uint64_t>(net.params_.size())));
      net.params_.push_back({name, Tensor::uniform(std::move(shape), -bound, bound, rng)});
      return static_cast<int>(net.params_.size()) - 1;
    };

    net.stem_ = push("stem", {base, cfg.in_channels, 3, 3});
    net.modules_.resize(static_cast<size_t>(cfg.num_modules));
    for (int m = 0; m < cfg.num_modules; ++m) {
      auto& idx = net.modules_[static_cast<size_t>(m)];
      const std::string prefix = "module" + std::to_string(m) + ".";
      for (int s : cfg.scales) {
        const std::string tag = prefix + "scale" + std::to_string(s) + ".";
        if (cfg.pointwise_reduction) {
          idx.reduce.push_back(push(tag + "reduce", {half, base, 1, 1}));
          idx.conv.push_back(push(tag + "conv", {half, half, s, s}));
        } else {
          idx.conv.push_back(push(tag + "conv", {half, base, s, s}));
        }
      }
      idx.merge = push(prefix + "merge",
                       {base, half * static_cast<int64_t>(cfg.scales.size()), 1, 1});
    }
    net.output_ = push("output", {cfg.out_channels, base, 1, 1});

    int64_t total = 0;
    for (const Param& p : net.params_) total += p.value.numel();
    if (total != parameter_count(cfg))
      throw ConfigError("parameter audit failed: built " + std::to_string(total) +
                        " weights, closed form says " +
                        std::to_string(parameter_count(cfg)));
    return net;
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  /// Pre-merge branch outputs of one module, one tensor per scale.
  std::vector<Tensor> branch_outputs(int module_index, const Tensor& x) const {
    check_module_input(module_index, x);
    const auto& idx = modules_[static_cast<size_t>(module_index)];
    std::vector<Tensor> branches;
    branches.reserve(cfg_.scales.size());
    Tensor shared;  // leaky(x), shared across branches when nothing reduces
    for (size_t i = 0; i < cfg_.scales.size(); ++i) {
      Tensor pre;
      if (cfg_.pointwise_reduction) {
        pre = leaky_relu(conv2d(x, value(idx.reduce[i])), cfg_.leaky_slope);
      } else {
        if (!shared.defined()) shared = leaky_relu(x, cfg_.leaky_slope);
        pre = shared;
      }
      branches.push_back(conv2d(pre, value(idx.conv[i])));
    }
    return branches;
  }

  /// One multi-scale module: per-scale branches, channel concat, 1x1 merge,
  /// residual addition. Zero inner weights make this the identity map.
  Tensor module_forward(int module_index, const Tensor& x) const {
    std::vector<Tensor> branches = branch_outputs(module_index, x);
    Tensor merged =
        conv2d(concat_channels(branches), value(modules_[static_cast<size_t>(module_index)].merge));
    return add(x, merged);
  }

  /// Whole network: [N,in,H,W] -> [N,out,H,W], H and W unchanged. Output is
  /// unclamped; clamping to [0,1] happens only at image export.
  Tensor forward(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != cfg_.in_channels)
      throw DimensionError("forward: batch must be [N," +
                           std::to_string(cfg_.in_channels) + ",H,W]");
    if (batch.dim(2) < cfg_.max_scale() || batch.dim(3) < cfg_.max_scale())
      throw DimensionError("forward: spatial size below the largest branch scale");
    Tensor x = leaky_relu(conv2d(batch, value(stem_)), cfg_.leaky_slope);
    for (int m = 0; m < cfg_.num_modules; ++m) x = module_forward(m, x);
    return conv2d(x, value(output_));
  }

 private:
  struct ModuleIdx {
    std::vector<int> reduce;
    std::vector<int> conv;
    int merge = -1;
  };

  const Tensor& value(int param_index) const {
    return params_[static_cast<size_t>(param_index)].value;
  }

  void check_module_input(int module_index, const Tensor& x) const {
    if (module_index < 0 || module_index >= cfg_.num_modules)
      throw DimensionError("module index out of range");
    if (x.rank() != 4 || x.dim(1) != cfg_.base_channels)
      throw DimensionError("module input must carry base_channels channels");
  }

  NetworkConfig cfg_;
  std::vector<Param> params_;
  std::vector<ModuleIdx> modules_;
  int stem_ = -1;
  int output_ = -1;
};

/// Renders each scale's branch activations at one module for a single image:
/// every map min-max normalized on its own, tiled into one grayscale PNG per
/// scale. Returns the written paths in scale order.
inline std::vector<std::string> dump_feature_maps(const DeepDeblurNet& net,
                                                  const Image& img, int module_index,
                                                  const std::string& out_dir) {
  const NetworkConfig& cfg = net.config();
  if (module_index < 0 || module_index >= cfg.num_modules)
    throw DimensionError("dump_feature_maps: module index out of range");
  std::filesystem::create_directories(out_dir);

  Tensor x = leaky_relu(conv2d(to_tensor(img), net.params()[0].value), cfg.leaky_slope);
  for (int m = 0; m < module_index; ++m) x = net.module_forward(m, x);
  const std::vector<Tensor> branches = net.branch_outputs(module_index, x);

  std::vector<std::string> paths;
  const int h = img.height, w = img.width;
  for (size_t s = 0; s < branches.size(); ++s) {
    const Tensor& b = branches[s];
    const int maps = static_cast<int>(b.dim(1));
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(maps))));
    const int rows = (maps + cols - 1) / cols;
    Image sheet = Image::create(rows * (h + 1) - 1, cols * (w + 1) - 1, 1, 1.0);
    for (int m = 0; m < maps; ++m) {
      const double* plane = b.data().data() + static_cast<size_t>(m) * h * w;
      double lo = plane[0], hi = plane[0];
      for (int i = 1; i < h * w; ++i) {
        lo = std::min(lo, plane[i]);
        hi = std::max(hi, plane[i]);
      }
      const int oy = (m / cols) * (h + 1), ox = (m % cols) * (w + 1);
      for (int y = 0; y < h; ++y)
        for (int xq = 0; xq < w; ++xq) {
          const double v = plane[y * w + xq];
          sheet.at(0, oy + y, ox + xq) =
              hi - lo < 1e-12 ? 0.5 : (v - lo) / (hi - lo);
        }
    }
    const std::string path = (std::filesystem::path(out_dir) /
                              ("module" + std::to_string(module_index) + "_scale" +
                               std::to_string(cfg.scales[s]) + ".png"))
                                 .string();
    save_png(sheet, path);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace deepdeblur
