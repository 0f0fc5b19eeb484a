#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/model.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"

namespace deepdeblur {

/// Weights of the combined objective; the L2 term is fixed at 1.
struct LossWeights {
  double alpha = 1e-4;  // total-variation term
  double beta = 1e-4;   // facial feature term

  void validate() const {
    if (alpha < 0.0 || beta < 0.0)
      throw ConfigError("loss weights must be non-negative");
  }
};

/// Differentiable map from an image batch [N,C,H,W] to a feature batch
/// [N,D,1,1] of fixed length D. Implementations must be deterministic.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Tensor features(const Tensor& batch) const = 0;
  virtual int64_t feature_dim() const = 0;
};

/// Mean squared deviation over every element: (1/(N*C*H*W)) sum (pred-target)^2.
inline Tensor l2_loss(const Tensor& pred, const Tensor& target) {
  return mean_all(square(sub(pred, target)));
}

/// Sum of squared forward differences (horizontal and vertical), summed over
/// channels, averaged over the batch only. Deliberately carries no 1/(WHC)
/// factor; the configured alpha absorbs the scale.
inline Tensor tv_loss(const Tensor& pred) {
  if (pred.rank() != 4) throw DimensionError("tv_loss: expected [N,C,H,W]");
  const int64_t n = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
  if (h < 2 && w < 2)
    throw DimensionError("tv_loss: 1x1 spatial input has no neighbor differences");

  const auto& v = pred.data();
  const int64_t plane = h * w;
  double acc = 0.0;
  for (int64_t p = 0; p < n * c; ++p) {
    const double* base = v.data() + p * plane;
    for (int64_t y = 0; y + 1 < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double d = base[(y + 1) * w + x] - base[y * w + x];
        acc += d * d;
      }
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x + 1 < w; ++x) {
        const double d = base[y * w + x + 1] - base[y * w + x];
        acc += d * d;
      }
  }

  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  Tape* tape = detail::common_tape({&pred});
  if (tape) {
    tape->record(out, {pred}, [pred, n, c, h, w, plane](const Tensor& out) {
      if (!detail::tracked(pred)) return;
      const double g2 = 2.0 * out.grad()[0] / static_cast<double>(n);
      const auto& pv = pred.data();
      auto& pg = pred.grad_mut();
      for (int64_t p = 0; p < n * c; ++p) {
        const double* base = pv.data() + p * plane;
        double* gbase = pg.data() + p * plane;
        for (int64_t y = 0; y + 1 < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            const double d = g2 * (base[(y + 1) * w + x] - base[y * w + x]);
            gbase[(y + 1) * w + x] += d;
            gbase[y * w + x] -= d;
          }
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x + 1 < w; ++x) {
            const double d = g2 * (base[y * w + x + 1] - base[y * w + x]);
            gbase[y * w + x + 1] += d;
            gbase[y * w + x] -= d;
          }
      }
    });
  }
  return out;
}

/// Squared feature distance ||phi(pred) - phi(target)||^2, averaged over the
/// batch.
inline Tensor facial_loss(const Tensor& pred, const Tensor& target,
                          const FeatureExtractor& phi) {
  detail::check_same_shape(pred, target, "facial_loss");
  Tensor diff = sub(phi.features(pred), phi.features(target));
  return scale(sum_all(square(diff)), 1.0 / static_cast<double>(pred.dim(0)));
}

struct LossParts {
  Tensor l2;
  Tensor tv;
  Tensor face;
  Tensor total;
};

/// All components of the combined objective, each tracked on the inputs'
/// tape, with total = l2 + alpha*tv + beta*face by construction.
inline LossParts total_loss_parts(const Tensor& pred, const Tensor& target,
                                  const LossWeights& w, const FeatureExtractor& phi) {
  w.validate();
  LossParts parts;
  parts.l2 = l2_loss(pred, target);
  parts.tv = tv_loss(pred);
  parts.face = facial_loss(pred, target, phi);
  parts.total = add(parts.l2, add(scale(parts.tv, w.alpha), scale(parts.face, w.beta)));
  return parts;
}

inline Tensor total_loss(const Tensor& pred, const Tensor& target,
                         const LossWeights& w, const FeatureExtractor& phi) {
  return total_loss_parts(pred, target, w, phi).total;
}

/// Fixed-weight stand-in for a pretrained recognition embedder: two stride-2
/// convolutions with leaky ReLU, a global spatial average, and a 1x1 linear
/// map to feature_dim. Weights are drawn once per seed and never trained.
class ProxyExtractor final : public FeatureExtractor {
 public:
  ProxyExtractor(std::uint64_t seed, int64_t feature_dim, int64_t in_channels = 3)
      : feature_dim_(feature_dim), in_channels_(in_channels) {
    if (feature_dim < 1) throw ConfigError("proxy extractor: feature_dim must be >= 1");
    if (in_channels < 1) throw ConfigError("proxy extractor: in_channels must be >= 1");
    auto push = [this, seed](const std::string& name, std::vector<int64_t> shape) {
      const int64_t fan_in = shape[1] * shape[2] * shape[3];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Rng rng = Rng::stream(seed, stream_id(stream_tag::kInit, 1,
                                            static_cast<std::uint64_t>(params_.size())));
      params_.push_back({name, Tensor::uniform(std::move(shape), -bound, bound, rng)});
    };
    push("conv1", {8, in_channels, 3, 3});
    push("conv2", {16, 8, 3, 3});
    push("proj", {feature_dim, 16, 1, 1});
  }

  /// Rebuilds an extractor from previously serialized weights.
  explicit ProxyExtractor(std::vector<Param> params) : params_(std::move(params)) {
    if (params_.size() != 3 || params_[0].name != "conv1" || params_[1].name != "conv2" ||
        params_[2].name != "proj")
      throw ParseError("proxy extractor: expected weights conv1, conv2, proj");
    in_channels_ = params_[0].value.dim(1);
    feature_dim_ = params_[2].value.dim(0);
  }

  Tensor features(const Tensor& batch) const override {
    if (batch.rank() != 4 || batch.dim(1) != in_channels_)
      throw DimensionError("proxy extractor: batch must be [N," +
                           std::to_string(in_channels_) + ",H,W]");
    Tensor x = leaky_relu(conv2d(batch, params_[0].value, 2), 0.01);
    x = leaky_relu(conv2d(x, params_[1].value, 2), 0.01);
    return conv2d(mean_hw(x), params_[2].value);
  }

  int64_t feature_dim() const override { return feature_dim_; }
  const std::vector<Param>& params() const { return params_; }

 private:
  std::vector<Param> params_;
  int64_t feature_dim_ = 0;
  int64_t in_channels_ = 0;
};

inline std::shared_ptr<FeatureExtractor> proxy_extractor(std::uint64_t seed,
                                                         int64_t feature_dim = 64) {
  return std::make_shared<ProxyExtractor>(seed, feature_dim);
}

}  // namespace deepdeblur
