#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/rng.hpp"

namespace deepdeblur {

class Tape;

/// Dense row-major tensor of doubles.
///
/// A Tensor is a cheap handle: copies share the underlying data buffer.
/// The buffer is treated as immutable once the tensor has been handed to
/// an operation; mutable_data() exists for fill-at-construction code.
/// grad/tape/node are per-use differentiation metadata attached by a Tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t;
    t.init(std::move(shape));
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, double value) {
    Tensor t;
    t.init(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> values) {
    Tensor t;
    t.init(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw DimensionError("from_data: value count does not match shape");
    *t.data_ = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor uniform(std::vector<int64_t> shape, double lo, double hi, Rng& rng) {
    Tensor t;
    t.init(std::move(shape));
    for (double& v : *t.data_) v = rng.uniform(lo, hi);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape_) n *= d;
    return shape_.empty() ? 0 : n;
  }

  bool defined() const { return data_ != nullptr; }

  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& mutable_data() { return *data_; }

  bool has_grad() const { return grad_ != nullptr; }

  const std::vector<double>& grad() const {
    if (!grad_) throw AutodiffError("tensor has no gradient buffer");
    return *grad_;
  }

  /// Mutable view of the gradient buffer; backward rules accumulate here.
  std::vector<double>& grad_mut() const {
    if (!grad_) throw AutodiffError("tensor has no gradient buffer");
    return *grad_;
  }

  /// Value of a one-element tensor.
  double item() const {
    if (numel() != 1) throw DimensionError("item: tensor is not scalar");
    return (*data_)[0];
  }

  /// Same data, no differentiation metadata. Gradients never flow through.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  /// Deep copy of the data, no metadata.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;

  void init(std::vector<int64_t> shape) {
    if (shape.empty()) throw DimensionError("tensor shape must be non-empty");
    for (int64_t d : shape)
      if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    shape_ = std::move(shape);
    data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(numel()), 0.0);
  }

  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Reverse-mode differentiation record.
///
/// Operations append nodes in execution order, so parents always precede
/// children and one reverse sweep visits each node once. Gradient buffers
/// are allocated (zeroed) when a tensor is watched or recorded, so every
/// handle sharing that tensor's buffers observes the gradients written by
/// backward(). A tape runs backward once; reset() clears it for reuse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf (parameter or input) whose gradient is wanted.
  /// Returns a handle carrying a fresh zeroed gradient buffer.
  Tensor watch(Tensor t) {
    if (!t.defined()) throw AutodiffError("watch: undefined tensor");
    if (t.tape_ == this && t.node_ >= 0) return t;  // already watched here
    t.tape_ = this;
    t.grad_ = std::make_shared<std::vector<double>>(static_cast<size_t>(t.numel()), 0.0);
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t, {}, nullptr});
    return t;
  }

  /// Records `result` as the output of an operation over `parents`.
  /// `backward` is invoked with the recorded result (gradient attached);
  /// it reads result.grad() and accumulates into the gradient buffers of
  /// those parents that are tracked on this tape. The rule must not capture
  /// the result tensor itself: at capture time it has no gradient buffer yet.
  void record(Tensor& result, const std::vector<Tensor>& parents,
              std::function<void(const Tensor&)> backward) {
    result.tape_ = this;
    result.grad_ =
        std::make_shared<std::vector<double>>(static_cast<size_t>(result.numel()), 0.0);
    result.node_ = static_cast<int>(nodes_.size());
    Node node;
    node.value = result;
    node.backward = std::move(backward);
    for (const Tensor& p : parents)
      if (p.tape_ == this && p.node_ >= 0) node.parents.push_back(p.node_);
    nodes_.push_back(std::move(node));
  }

  /// Accumulates d(loss)/d(x) into the gradient buffer of every tracked
  /// tensor that loss depends on. One shot per tape.
  void run_backward(const Tensor& loss) {
    if (used_) throw AutodiffError("backward already run on this tape; reset first");
    if (loss.tape_ != this || loss.node_ < 0)
      throw AutodiffError("backward: loss is detached from this tape");
    if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar");
    used_ = true;
    std::vector<char> needed(nodes_.size(), 0);
    needed[static_cast<size_t>(loss.node_)] = 1;
    (*loss.grad_)[0] = 1.0;
    for (int i = loss.node_; i >= 0; --i) {
      if (!needed[static_cast<size_t>(i)]) continue;
      Node& n = nodes_[static_cast<size_t>(i)];
      for (int p : n.parents) needed[static_cast<size_t>(p)] = 1;
      if (n.backward) n.backward(n.value);
    }
  }

  void reset() {
    nodes_.clear();
    used_ = false;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    std::function<void(const Tensor&)> backward;
  };
  std::vector<Node> nodes_;
  bool used_ = false;
};

inline void backward(const Tensor& loss) {
  if (!loss.tape()) throw AutodiffError("backward: tensor is not on a tape");
  loss.tape()->run_backward(loss);
}

namespace detail {

/// Common tape of the arguments; null when all are untracked.
inline Tape* common_tape(std::initializer_list<const Tensor*> args) {
  Tape* tape = nullptr;
  for (const Tensor* a : args) {
    if (!a->tape()) continue;
    if (tape && tape != a->tape())
      throw AutodiffError("operands belong to different tapes");
    tape = a->tape();
  }
  return tape;
}

inline bool tracked(const Tensor& t) { return t.tape() != nullptr && t.node() >= 0; }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": operand shapes differ");
}

inline void axpy(std::vector<double>& y, const std::vector<double>& x, double a) {
  Eigen::Map<Eigen::ArrayXd>(y.data(), static_cast<Eigen::Index>(y.size())) +=
      a * Eigen::Map<const Eigen::ArrayXd>(x.data(), static_cast<Eigen::Index>(x.size()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tape* tape = detail::common_tape({&a, &b});
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tape) {
    tape->record(out, {a, b}, [a, b](const Tensor& out) {
      if (detail::tracked(a)) detail::axpy(a.grad_mut(), out.grad(), 1.0);
      if (detail::tracked(b)) detail::axpy(b.grad_mut(), out.grad(), 1.0);
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tape* tape = detail::common_tape({&a, &b});
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (tape) {
    tape->record(out, {a, b}, [a, b](const Tensor& out) {
      if (detail::tracked(a)) detail::axpy(a.grad_mut(), out.grad(), 1.0);
      if (detail::tracked(b)) detail::axpy(b.grad_mut(), out.grad(), -1.0);
    });
  }
  return out;
}

inline Tensor square(const Tensor& t) {
  Tape* tape = detail::common_tape({&t});
  Tensor out = Tensor::zeros(t.shape());
  const auto& tv = t.data();
  auto& ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = tv[i] * tv[i];
  if (tape) {
    tape->record(out, {t}, [t](const Tensor& out) {
      if (!detail::tracked(t)) return;
      auto& g = t.grad_mut();
      const auto& go = out.grad();
      const auto& tv2 = t.data();
      for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * tv2[i] * go[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& t, double c) {
  Tape* tape = detail::common_tape({&t});
  Tensor out = Tensor::zeros(t.shape());
  const auto& tv = t.data();
  auto& ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = c * tv[i];
  if (tape) {
    tape->record(out, {t}, [t, c](const Tensor& out) {
      if (detail::tracked(t)) detail::axpy(t.grad_mut(), out.grad(), c);
    });
  }
  return out;
}

inline Tensor leaky_relu(const Tensor& t, double slope = 0.01) {
  if (!(slope > 0.0 && slope < 1.0))
    throw DimensionError("leaky_relu: slope must lie in (0,1)");
  Tape* tape = detail::common_tape({&t});
  Tensor out = Tensor::zeros(t.shape());
  const auto& tv = t.data();
  auto& ov = out.mutable_data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = tv[i] >= 0.0 ? tv[i] : slope * tv[i];
  if (tape) {
    tape->record(out, {t}, [t, slope](const Tensor& out) {
      if (!detail::tracked(t)) return;
      auto& g = t.grad_mut();
      const auto& go = out.grad();
      const auto& tv2 = t.data();
      for (size_t i = 0; i < g.size(); ++i) g[i] += (tv2[i] >= 0.0 ? 1.0 : slope) * go[i];
    });
  }
  return out;
}

/// Joins [N,Ci,H,W] blocks along the channel axis, order preserved.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor& first = parts.front();
  if (first.rank() != 4) throw DimensionError("concat_channels: rank-4 tensors required");
  int64_t total_c = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 4 || p.dim(0) != first.dim(0) || p.dim(2) != first.dim(2) ||
        p.dim(3) != first.dim(3))
      throw DimensionError("concat_channels: N/H/W must match across parts");
    total_c += p.dim(1);
  }
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    Tape* pt = detail::common_tape({&p});
    if (pt && tape && pt != tape) throw AutodiffError("operands belong to different tapes");
    if (pt) tape = pt;
  }
  const int64_t n_batch = first.dim(0), height = first.dim(2), width = first.dim(3);
  const int64_t hw = height * width;
  Tensor out = Tensor::zeros({n_batch, total_c, height, width});
  auto& ov = out.mutable_data();
  for (int64_t n = 0; n < n_batch; ++n) {
    int64_t c_off = 0;
    for (const Tensor& p : parts) {
      const int64_t pc = p.dim(1);
      std::copy_n(p.data().begin() + n * pc * hw, pc * hw,
                  ov.begin() + (n * total_c + c_off) * hw);
      c_off += pc;
    }
  }
  if (tape) {
    std::vector<Tensor> captured = parts;
    tape->record(out, captured, [captured, n_batch, total_c, hw](const Tensor& out) {
      const auto& go = out.grad();
      for (int64_t n = 0; n < n_batch; ++n) {
        int64_t c_off = 0;
        for (const Tensor& p : captured) {
          const int64_t pc = p.dim(1);
          if (detail::tracked(p)) {
            auto& g = p.grad_mut();
            const double* src = go.data() + (n * total_c + c_off) * hw;
            double* dst = g.data() + n * pc * hw;
            for (int64_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
          }
          c_off += pc;
        }
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& t) {
  Tape* tape = detail::common_tape({&t});
  double s = 0.0;
  for (double v : t.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tape) {
    tape->record(out, {t}, [t](const Tensor& out) {
      if (!detail::tracked(t)) return;
      auto& g = t.grad_mut();
      const double go = out.grad()[0];
      for (double& v : g) v += go;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& t) {
  Tape* tape = detail::common_tape({&t});
  double s = 0.0;
  for (double v : t.data()) s += v;
  const double inv = 1.0 / static_cast<double>(t.numel());
  Tensor out = Tensor::scalar(s * inv);
  if (tape) {
    tape->record(out, {t}, [t, inv](const Tensor& out) {
      if (!detail::tracked(t)) return;
      auto& g = t.grad_mut();
      const double go = out.grad()[0] * inv;
      for (double& v : g) v += go;
    });
  }
  return out;
}

/// Spatial average: [N,C,H,W] -> [N,C,1,1].
inline Tensor mean_hw(const Tensor& t) {
  if (t.rank() != 4) throw DimensionError("mean_hw: rank-4 tensor required");
  Tape* tape = detail::common_tape({&t});
  const int64_t n_batch = t.dim(0), channels = t.dim(1), hw = t.dim(2) * t.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  Tensor out = Tensor::zeros({n_batch, channels, 1, 1});
  auto& ov = out.mutable_data();
  const auto& tv = t.data();
  for (int64_t nc = 0; nc < n_batch * channels; ++nc) {
    double s = 0.0;
    const double* src = tv.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i) s += src[i];
    ov[static_cast<size_t>(nc)] = s * inv;
  }
  if (tape) {
    tape->record(out, {t}, [t, n_batch, channels, hw, inv](const Tensor& out) {
      if (!detail::tracked(t)) return;
      auto& g = t.grad_mut();
      const auto& go = out.grad();
      for (int64_t nc = 0; nc < n_batch * channels; ++nc) {
        const double gv = go[static_cast<size_t>(nc)] * inv;
        double* dst = g.data() + nc * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += gv;
      }
    });
  }
  return out;
}

namespace detail {

/// Geometry of a "same" convolution with edge replication. Padding before
/// each axis is k/2 and after is (k-1)/2, so odd kernels pad symmetrically
/// and even ones carry the extra row/column on the leading side.
struct ConvGeom {
  int64_t n, c_in, h, w;
  int64_t c_out, kh, kw;
  int64_t stride;
  int64_t out_h, out_w;
  int64_t pad_t, pad_l;
  // Clamped source coordinates per (output position, kernel offset).
  std::vector<int64_t> ytab, xtab;

  ConvGeom(const Tensor& input, const Tensor& weight, int64_t stride_in) {
    if (input.rank() != 4 || weight.rank() != 4)
      throw DimensionError("conv2d: input and weight must be rank-4");
    if (input.dim(1) != weight.dim(1))
      throw DimensionError("conv2d: input channels do not match weight");
    if (stride_in < 1) throw DimensionError("conv2d: stride must be >=1");
    n = input.dim(0); c_in = input.dim(1); h = input.dim(2); w = input.dim(3);
    c_out = weight.dim(0); kh = weight.dim(2); kw = weight.dim(3);
    stride = stride_in;
    out_h = (h + stride - 1) / stride;
    out_w = (w + stride - 1) / stride;
    pad_t = kh / 2;
    pad_l = kw / 2;
    ytab.resize(static_cast<size_t>(out_h * kh));
    for (int64_t oh = 0; oh < out_h; ++oh)
      for (int64_t r = 0; r < kh; ++r)
        ytab[static_cast<size_t>(oh * kh + r)] =
            std::clamp<int64_t>(oh * stride + r - pad_t, 0, h - 1);
    xtab.resize(static_cast<size_t>(out_w * kw));
    for (int64_t ow = 0; ow < out_w; ++ow)
      for (int64_t r = 0; r < kw; ++r)
        xtab[static_cast<size_t>(ow * kw + r)] =
            std::clamp<int64_t>(ow * stride + r - pad_l, 0, w - 1);
  }

  int64_t patch_len() const { return c_in * kh * kw; }
  int64_t out_hw() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1; }

  /// Output pixels per im2col tile; bounds the scratch buffer while staying
  /// a pure function of the shapes, so evaluation order never varies.
  int64_t tile_cols() const {
    constexpr int64_t kScratchCap = int64_t{1} << 22;  // doubles
    return std::clamp<int64_t>(kScratchCap / std::max<int64_t>(patch_len(), 1), 1, out_hw());
  }

  /// Gathers columns [p0, p0+cols) of the padded-input patch matrix.
  void fill_cols(const double* in_batch, int64_t p0, int64_t cols, double* col) const {
    for (int64_t j = 0; j < cols; ++j) {
      const int64_t p = p0 + j;
      const int64_t oh = p / out_w, ow = p % out_w;
      double* dst = col + j * patch_len();
      const int64_t* yrow = ytab.data() + oh * kh;
      const int64_t* xrow = xtab.data() + ow * kw;
      for (int64_t ci = 0; ci < c_in; ++ci) {
        const double* plane = in_batch + ci * h * w;
        for (int64_t r = 0; r < kh; ++r) {
          const double* row = plane + yrow[r] * w;
          for (int64_t s = 0; s < kw; ++s) *dst++ = row[xrow[s]];
        }
      }
    }
  }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
using StridedRowMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedRowMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

}  // namespace detail

/// 2D convolution (cross-correlation orientation) with "same" spatial output
/// and edge-replicated borders: input [N,C_in,H,W] with weight
/// [C_out,C_in,kH,kW] gives [N,C_out,ceil(H/stride),ceil(W/stride)].
/// Differentiable in both arguments. Implemented as tiled im2col + GEMM.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, int64_t stride = 1) {
  detail::ConvGeom g(input, weight, stride);
  Tape* tape = detail::common_tape({&input, &weight});
  Tensor out = Tensor::zeros({g.n, g.c_out, g.out_h, g.out_w});

  const int64_t patch = g.patch_len(), ohw = g.out_hw(), hw = g.h * g.w;
  Eigen::Map<const detail::RowMat> wmat(weight.data().data(), g.c_out, patch);
  auto& ov = out.mutable_data();

  if (g.pointwise()) {
    for (int64_t n = 0; n < g.n; ++n) {
      Eigen::Map<const detail::RowMat> in_mat(input.data().data() + n * g.c_in * hw,
                                              g.c_in, hw);
      Eigen::Map<detail::RowMat> out_mat(ov.data() + n * g.c_out * ohw, g.c_out, ohw);
      out_mat.noalias() = wmat * in_mat;
    }
  } else {
    const int64_t tile = g.tile_cols();
    std::vector<double> col(static_cast<size_t>(patch * tile));
    for (int64_t n = 0; n < g.n; ++n) {
      const double* in_batch = input.data().data() + n * g.c_in * hw;
      for (int64_t p0 = 0; p0 < ohw; p0 += tile) {
        const int64_t cols = std::min(tile, ohw - p0);
        g.fill_cols(in_batch, p0, cols, col.data());
        Eigen::Map<const detail::ColMat> col_mat(col.data(), patch, cols);
        detail::StridedRowMap out_mat(ov.data() + n * g.c_out * ohw + p0, g.c_out, cols,
                                      Eigen::OuterStride<>(ohw));
        out_mat.noalias() = wmat * col_mat;
      }
    }
  }

  if (tape) {
    tape->record(out, {input, weight}, [input, weight, g](const Tensor& out) {
      const bool want_din = detail::tracked(input);
      const bool want_dw = detail::tracked(weight);
      if (!want_din && !want_dw) return;
      const int64_t patch = g.patch_len(), ohw = g.out_hw(), hw = g.h * g.w;
      Eigen::Map<const detail::RowMat> wmat(weight.data().data(), g.c_out, patch);
      const auto& go = out.grad();

      if (g.pointwise()) {
        for (int64_t n = 0; n < g.n; ++n) {
          Eigen::Map<const detail::RowMat> go_mat(go.data() + n * g.c_out * ohw, g.c_out,
                                                  ohw);
          Eigen::Map<const detail::RowMat> in_mat(input.data().data() + n * g.c_in * hw,
                                                  g.c_in, hw);
          if (want_dw) {
            auto& gw = weight.grad_mut();
            Eigen::Map<detail::RowMat> gw_mat(gw.data(), g.c_out, patch);
            gw_mat.noalias() += go_mat * in_mat.transpose();
          }
          if (want_din) {
            auto& gi = input.grad_mut();
            Eigen::Map<detail::RowMat> gi_mat(gi.data() + n * g.c_in * hw, g.c_in, hw);
            gi_mat.noalias() += wmat.transpose() * go_mat;
          }
        }
        return;
      }

      const int64_t tile = g.tile_cols();
      std::vector<double> col(static_cast<size_t>(patch * tile));
      std::vector<double> dcol(want_din ? static_cast<size_t>(patch * tile) : 0);
      for (int64_t n = 0; n < g.n; ++n) {
        const double* in_batch = input.data().data() + n * g.c_in * hw;
        for (int64_t p0 = 0; p0 < ohw; p0 += tile) {
          const int64_t cols = std::min(tile, ohw - p0);
          detail::ConstStridedRowMap go_mat(go.data() + n * g.c_out * ohw + p0, g.c_out,
                                            cols, Eigen::OuterStride<>(ohw));
          if (want_dw) {
            g.fill_cols(in_batch, p0, cols, col.data());
            Eigen::Map<const detail::ColMat> col_mat(col.data(), patch, cols);
            auto& gw = weight.grad_mut();
            Eigen::Map<detail::RowMat> gw_mat(gw.data(), g.c_out, patch);
            gw_mat.noalias() += go_mat * col_mat.transpose();
          }
          if (want_din) {
            Eigen::Map<detail::ColMat> dcol_mat(dcol.data(), patch, cols);
            dcol_mat.noalias() = wmat.transpose() * go_mat;
            auto& gi = input.grad_mut();
            double* gi_batch = gi.data() + n * g.c_in * hw;
            // Scatter with the same clamped coordinates the gather used,
            // which is exactly the adjoint of edge replication.
            for (int64_t j = 0; j < cols; ++j) {
              const int64_t p = p0 + j;
              const int64_t oh = p / g.out_w, ow = p % g.out_w;
              const double* src = dcol.data() + j * patch;
              const int64_t* yrow = g.ytab.data() + oh * g.kh;
              const int64_t* xrow = g.xtab.data() + ow * g.kw;
              for (int64_t ci = 0; ci < g.c_in; ++ci) {
                double* plane = gi_batch + ci * hw;
                for (int64_t r = 0; r < g.kh; ++r) {
                  double* row = plane + yrow[r] * g.w;
                  for (int64_t s = 0; s < g.kw; ++s) row[xrow[s]] += *src++;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued tensor function, probing every coordinate of `at`.
inline double finite_diff_check(
    const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& at, double h) {
  if (!(h > 0.0)) throw OracleError("finite_diff_check: h must be positive");

  Tape tape;
  Tensor x = tape.watch(at.clone());
  Tensor y = f(tape, x);
  if (y.numel() != 1) throw OracleError("finite_diff_check: f must be scalar-valued");
  if (!std::isfinite(y.item())) throw OracleError("finite_diff_check: non-finite value");
  tape.run_backward(y);
  const std::vector<double> analytic = x.grad();

  auto eval = [&f](const Tensor& p) {
    Tape t;
    Tensor r = f(t, t.watch(p.clone()));
    const double v = r.item();
    if (!std::isfinite(v)) throw OracleError("finite_diff_check: non-finite evaluation");
    return v;
  };

  double worst = 0.0;
  Tensor probe = at.clone();
  auto& pv = probe.mutable_data();
  for (size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + h;
    const double fp = eval(probe);
    pv[i] = orig - h;
    const double fm = eval(probe);
    pv[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace deepdeblur
