#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepdeblur/errors.hpp"
#include "deepdeblur/imaging.hpp"
#include "deepdeblur/kernels.hpp"
#include "deepdeblur/losses.hpp"
#include "deepdeblur/model.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace deepdeblur {

/// Loss weights taking effect from a given step onward.
struct WeightPoint {
  std::int64_t step = 0;
  LossWeights weights;
};

struct TrainConfig {
  double lr0 = 0.001;
  double decay_rate = 0.95;       // exponential factor per decay_steps
  std::int64_t decay_steps = 1000;
  std::int64_t plateau_patience = 500;  // steps without windowed-mean improvement
  std::int64_t plateau_window = 100;    // moving-average span for plateau detection
  double rms_decay = 0.9;
  double rms_eps = 1e-8;
  std::int64_t batch_size = 4;
  std::int64_t max_steps = 10000;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  std::vector<WeightPoint> weight_schedule;  // empty keeps loss_weights constant
  std::uint64_t extractor_seed = 0;
  std::int64_t feature_dim = 64;
  GpConfig gp;
  double noise_sigma = 0.01;
  std::int64_t image_height = 112;
  std::int64_t image_width = 96;
  std::int64_t checkpoint_interval = 500;  // 0 disables periodic checkpoints

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("train.lr0 must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0))
      throw ConfigError("train.decay_rate must lie in (0,1]");
    if (decay_steps < 1) throw ConfigError("train.decay_steps must be >= 1");
    if (plateau_patience < 1) throw ConfigError("train.plateau_patience must be >= 1");
    if (plateau_window < 1) throw ConfigError("train.plateau_window must be >= 1");
    if (!(rms_decay > 0.0 && rms_decay < 1.0))
      throw ConfigError("train.rms_decay must lie in (0,1)");
    if (!(rms_eps > 0.0)) throw ConfigError("train.rms_eps must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("train.noise_sigma must be >= 0");
    if (image_height < 1 || image_width < 1)
      throw ConfigError("train.image size must be positive");
    if (checkpoint_interval < 0)
      throw ConfigError("train.checkpoint_interval must be >= 0");
    if (feature_dim < 1) throw ConfigError("loss.feature_dim must be >= 1");
    loss_weights.validate();
    std::int64_t prev = -1;
    for (const WeightPoint& p : weight_schedule) {
      if (p.step < 0 || p.step <= prev)
        throw ConfigError("loss.schedule steps must be ascending and >= 0");
      p.weights.validate();
      prev = p.step;
    }
    gp.validate();
  }
};

/// Loss weights in force at a step: the last schedule point at or before it,
/// or the base weights when none applies.
inline LossWeights weights_at(const TrainConfig& cfg, std::int64_t step) {
  LossWeights w = cfg.loss_weights;
  for (const WeightPoint& p : cfg.weight_schedule) {
    if (p.step > step) break;
    w = p.weights;
  }
  return w;
}

namespace detail {

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline double parse_f64(const std::string& value, const std::string& key) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": not a number: '" + value + "'");
  }
}

inline std::int64_t parse_i64(const std::string& value, const std::string& key) {
  try {
    size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": not an integer: '" + value + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& value, const std::string& key) {
  try {
    size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size() || (!value.empty() && value[0] == '-'))
      throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": not an unsigned integer: '" + value + "'");
  }
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("config: " + key + ": expected 0/1/true/false, got '" + value + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t at = s.find(sep, start);
    if (at == std::string::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, at - start));
    start = at + 1;
  }
}

inline std::vector<int> parse_int_list(const std::string& value, const std::string& key) {
  std::vector<int> out;
  for (const std::string& part : split(value, ','))
    out.push_back(static_cast<int>(parse_i64(trim(part), key)));
  return out;
}

/// "step:alpha:beta,step:alpha:beta"; an empty string is an empty schedule.
inline std::vector<WeightPoint> parse_schedule(const std::string& value,
                                               const std::string& key) {
  std::vector<WeightPoint> out;
  if (trim(value).empty()) return out;
  for (const std::string& part : split(value, ',')) {
    const std::vector<std::string> f = split(trim(part), ':');
    if (f.size() != 3)
      throw ConfigError("config: " + key + ": expected step:alpha:beta triples");
    WeightPoint p;
    p.step = parse_i64(trim(f[0]), key);
    p.weights.alpha = parse_f64(trim(f[1]), key);
    p.weights.beta = parse_f64(trim(f[2]), key);
    out.push_back(p);
  }
  return out;
}

inline std::string format_schedule(const std::vector<WeightPoint>& schedule) {
  std::string out;
  for (size_t i = 0; i < schedule.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(schedule[i].step) + ':' + format_g17(schedule[i].weights.alpha) +
           ':' + format_g17(schedule[i].weights.beta);
  }
  return out;
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

struct FullConfig {
  TrainConfig train;
  NetworkConfig net;
};

/// Canonical text of the train/loss/gp sections; the config digest hashes
/// exactly this string.
inline std::string write_train_sections(const TrainConfig& t) {
  using detail::format_g17;
  std::string s;
  s += "train.lr0=" + format_g17(t.lr0) + "\n";
  s += "train.decay_rate=" + format_g17(t.decay_rate) + "\n";
  s += "train.decay_steps=" + std::to_string(t.decay_steps) + "\n";
  s += "train.plateau_patience=" + std::to_string(t.plateau_patience) + "\n";
  s += "train.plateau_window=" + std::to_string(t.plateau_window) + "\n";
  s += "train.rms_decay=" + format_g17(t.rms_decay) + "\n";
  s += "train.rms_eps=" + format_g17(t.rms_eps) + "\n";
  s += "train.batch_size=" + std::to_string(t.batch_size) + "\n";
  s += "train.max_steps=" + std::to_string(t.max_steps) + "\n";
  s += "train.seed=" + std::to_string(t.seed) + "\n";
  s += "train.noise_sigma=" + format_g17(t.noise_sigma) + "\n";
  s += "train.image_height=" + std::to_string(t.image_height) + "\n";
  s += "train.image_width=" + std::to_string(t.image_width) + "\n";
  s += "train.checkpoint_interval=" + std::to_string(t.checkpoint_interval) + "\n";
  s += "loss.alpha=" + format_g17(t.loss_weights.alpha) + "\n";
  s += "loss.beta=" + format_g17(t.loss_weights.beta) + "\n";
  s += "loss.schedule=" + detail::format_schedule(t.weight_schedule) + "\n";
  s += "loss.extractor_seed=" + std::to_string(t.extractor_seed) + "\n";
  s += "loss.feature_dim=" + std::to_string(t.feature_dim) + "\n";
  s += "gp.sigma_f2=" + format_g17(t.gp.sigma_f2) + "\n";
  s += "gp.length_scale=" + format_g17(t.gp.length_scale) + "\n";
  s += "gp.step=" + format_g17(t.gp.step) + "\n";
  s += "gp.traj_len_min=" + std::to_string(t.gp.traj_len_min) + "\n";
  s += "gp.traj_len_max=" + std::to_string(t.gp.traj_len_max) + "\n";
  s += "gp.valid_size_min=" + std::to_string(t.gp.valid_size_min) + "\n";
  s += "gp.valid_size_max=" + std::to_string(t.gp.valid_size_max) + "\n";
  s += "gp.canvas=" + std::to_string(t.gp.canvas) + "\n";
  s += "gp.seed=" + std::to_string(t.gp.seed) + "\n";
  return s;
}

inline std::string write_net_section(const NetworkConfig& n) {
  std::string s;
  s += "net.num_modules=" + std::to_string(n.num_modules) + "\n";
  s += "net.base_channels=" + std::to_string(n.base_channels) + "\n";
  s += "net.scales=" + detail::format_int_list(n.scales) + "\n";
  s += "net.leaky_slope=" + detail::format_g17(n.leaky_slope) + "\n";
  s += "net.pointwise_reduction=" + std::string(n.pointwise_reduction ? "1" : "0") + "\n";
  s += "net.in_channels=" + std::to_string(n.in_channels) + "\n";
  s += "net.out_channels=" + std::to_string(n.out_channels) + "\n";
  return s;
}

inline std::string write_config_text(const FullConfig& cfg) {
  return write_train_sections(cfg.train) + write_net_section(cfg.net);
}

/// 16-hex-digit FNV-1a hash of the canonical train/loss/gp section text.
/// Stored in checkpoints so a resume with altered settings is caught.
inline std::string train_config_digest(const TrainConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a64(write_train_sections(cfg))));
  return buf;
}

/// Applies one key=value setting addressed as section.field.
inline void apply_config_entry(FullConfig& cfg, const std::string& key,
                               const std::string& value) {
  using namespace detail;
  TrainConfig& t = cfg.train;
  NetworkConfig& n = cfg.net;
  if (key == "train.lr0") t.lr0 = parse_f64(value, key);
  else if (key == "train.decay_rate") t.decay_rate = parse_f64(value, key);
  else if (key == "train.decay_steps") t.decay_steps = parse_i64(value, key);
  else if (key == "train.plateau_patience") t.plateau_patience = parse_i64(value, key);
  else if (key == "train.plateau_window") t.plateau_window = parse_i64(value, key);
  else if (key == "train.rms_decay") t.rms_decay = parse_f64(value, key);
  else if (key == "train.rms_eps") t.rms_eps = parse_f64(value, key);
  else if (key == "train.batch_size") t.batch_size = parse_i64(value, key);
  else if (key == "train.max_steps") t.max_steps = parse_i64(value, key);
  else if (key == "train.seed") t.seed = parse_u64(value, key);
  else if (key == "train.noise_sigma") t.noise_sigma = parse_f64(value, key);
  else if (key == "train.image_height") t.image_height = parse_i64(value, key);
  else if (key == "train.image_width") t.image_width = parse_i64(value, key);
  else if (key == "train.checkpoint_interval") t.checkpoint_interval = parse_i64(value, key);
  else if (key == "loss.alpha") t.loss_weights.alpha = parse_f64(value, key);
  else if (key == "loss.beta") t.loss_weights.beta = parse_f64(value, key);
  else if (key == "loss.schedule") t.weight_schedule = parse_schedule(value, key);
  else if (key == "loss.extractor_seed") t.extractor_seed = parse_u64(value, key);
  else if (key == "loss.feature_dim") t.feature_dim = parse_i64(value, key);
  else if (key == "gp.sigma_f2") t.gp.sigma_f2 = parse_f64(value, key);
  else if (key == "gp.length_scale") t.gp.length_scale = parse_f64(value, key);
  else if (key == "gp.step") t.gp.step = parse_f64(value, key);
  else if (key == "gp.traj_len_min") t.gp.traj_len_min = static_cast<int>(parse_i64(value, key));
  else if (key == "gp.traj_len_max") t.gp.traj_len_max = static_cast<int>(parse_i64(value, key));
  else if (key == "gp.valid_size_min") t.gp.valid_size_min = static_cast<int>(parse_i64(value, key));
  else if (key == "gp.valid_size_max") t.gp.valid_size_max = static_cast<int>(parse_i64(value, key));
  else if (key == "gp.canvas") t.gp.canvas = static_cast<int>(parse_i64(value, key));
  else if (key == "gp.seed") t.gp.seed = parse_u64(value, key);
  else if (key == "net.num_modules") n.num_modules = static_cast<int>(parse_i64(value, key));
  else if (key == "net.base_channels") n.base_channels = static_cast<int>(parse_i64(value, key));
  else if (key == "net.scales") n.scales = parse_int_list(value, key);
  else if (key == "net.leaky_slope") n.leaky_slope = parse_f64(value, key);
  else if (key == "net.pointwise_reduction") n.pointwise_reduction = parse_bool(value, key);
  else if (key == "net.in_channels") n.in_channels = static_cast<int>(parse_i64(value, key));
  else if (key == "net.out_channels") n.out_channels = static_cast<int>(parse_i64(value, key));
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Flat key=value settings over defaults; '#' starts a comment.
inline FullConfig parse_config_text(const std::string& text) {
  FullConfig cfg;
  int line_no = 0;
  for (const std::string& raw : detail::split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (const size_t hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    apply_config_entry(cfg, detail::trim(line.substr(0, eq)),
                       detail::trim(line.substr(eq + 1)));
  }
  cfg.train.validate();
  cfg.net.validate();
  return cfg;
}

inline FullConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

/// Per-parameter squared-gradient accumulators plus a completed-step count.
struct RmsState {
  std::vector<Tensor> acc;
  std::int64_t step = 0;

  static RmsState init(const std::vector<Param>& params) {
    RmsState s;
    s.acc.reserve(params.size());
    for (const Param& p : params) s.acc.push_back(Tensor::zeros(p.value.shape()));
    return s;
  }
};

/// acc <- rho*acc + (1-rho)*g^2 ; p <- p - lr*g/sqrt(acc+eps).
/// Every parameter value must carry a populated gradient (be watched on the
/// tape that ran backward). Values are replaced with fresh detached tensors,
/// so handles recorded on the old tape are left untouched.
inline void rmsprop_step(std::vector<Param>& params, RmsState& state, double lr,
                         double rho = 0.9, double eps = 1e-8) {
  if (!(lr > 0.0)) throw OptimizerError("rmsprop: learning rate must be positive");
  if (!(rho > 0.0 && rho < 1.0)) throw OptimizerError("rmsprop: decay must lie in (0,1)");
  if (!(eps > 0.0)) throw OptimizerError("rmsprop: epsilon must be positive");
  if (state.acc.size() != params.size())
    throw OptimizerError("rmsprop: accumulator count does not match parameters");
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    if (!p.value.has_grad())
      throw OptimizerError("rmsprop: parameter '" + p.name + "' has no gradient");
    if (state.acc[i].shape() != p.value.shape())
      throw OptimizerError("rmsprop: accumulator shape mismatch for '" + p.name + "'");
    const auto& g = p.value.grad();
    auto& a = state.acc[i].mutable_data();
    Tensor updated = p.value.clone();
    auto& u = updated.mutable_data();
    for (size_t j = 0; j < u.size(); ++j) {
      a[j] = rho * a[j] + (1.0 - rho) * g[j] * g[j];
      u[j] -= lr * g[j] / std::sqrt(a[j] + eps);
    }
    p.value = std::move(updated);
  }
  ++state.step;
}

/// Learning rate at `step` given the per-step total losses so far:
/// lr0 * decay_rate^(step/decay_steps) * 0.5^halvings. A halving fires each
/// time the plateau_window-step mean loss goes plateau_patience consecutive
/// steps without a new best. Pure function of its inputs, so a resumed run
/// replays it from the logged history.
inline double lr_schedule(std::int64_t step, const std::vector<double>& losses,
                          const TrainConfig& cfg) {
  int halvings = 0;
  double window_sum = 0.0;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t last_improve = 0;
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(losses.size()); ++t) {
    window_sum += losses[static_cast<size_t>(t)];
    if (t >= cfg.plateau_window)
      window_sum -= losses[static_cast<size_t>(t - cfg.plateau_window)];
    const double mean = window_sum / static_cast<double>(std::min(t + 1, cfg.plateau_window));
    if (mean < best) {
      best = mean;
      last_improve = t;
    } else if (t - last_improve >= cfg.plateau_patience) {
      ++halvings;
      best = mean;
      last_improve = t;
    }
  }
  return cfg.lr0 *
         std::pow(cfg.decay_rate,
                  static_cast<double>(step) / static_cast<double>(cfg.decay_steps)) *
         std::pow(0.5, halvings);
}

/// One synthetic training pair: a fresh kernel and the degraded image.
struct PairSample {
  Image blurry;
  Image sharp;
  MotionKernel kernel;
};

inline PairSample make_pair(const Image& sharp, const GpConfig& gp, double noise_sigma,
                            Rng& rng) {
  PairSample s{Image{}, sharp, synth_kernel(gp, rng)};
  s.blurry = blur(sharp, s.kernel, noise_sigma, rng);
  return s;
}

namespace checkpoint_kind {
inline constexpr const char* kNet = "net";
inline constexpr const char* kIdentityStub = "identity-stub";
inline constexpr const char* kProxyExtractor = "proxy-extractor";
}  // namespace checkpoint_kind

/// In-memory image of the on-disk container: a kind tag, optional network
/// layout, progress counter, config digest, and named tensors.
struct Checkpoint {
  std::string kind = checkpoint_kind::kNet;
  bool has_net = false;
  NetworkConfig net;
  std::int64_t step = 0;
  std::string digest;
  std::vector<Param> tensors;

  const Tensor* find(const std::string& name) const {
    for (const Param& p : tensors)
      if (p.name == name) return &p.value;
    return nullptr;
  }
};

namespace detail {

inline void write_raw(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ofstream& out, std::uint32_t v) { write_raw(out, &v, 4); }
inline void write_i64(std::ofstream& out, std::int64_t v) { write_raw(out, &v, 8); }

inline void read_raw(std::ifstream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw ParseError("checkpoint truncated");
}

inline std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  read_raw(in, &v, 4);
  return v;
}

inline std::int64_t read_i64(std::ifstream& in) {
  std::int64_t v = 0;
  read_raw(in, &v, 8);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);

  std::string header;
  header += "kind=" + ckpt.kind + "\n";
  header += "step=" + std::to_string(ckpt.step) + "\n";
  header += "digest=" + ckpt.digest + "\n";
  if (ckpt.has_net) header += write_net_section(ckpt.net);

  detail::write_raw(out, "DDBLR1", 6);
  detail::write_u32(out, static_cast<std::uint32_t>(header.size()));
  detail::write_raw(out, header.data(), header.size());
  detail::write_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const Param& p : ckpt.tensors) {
    detail::write_u32(out, static_cast<std::uint32_t>(p.name.size()));
    detail::write_raw(out, p.name.data(), p.name.size());
    detail::write_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int i = 0; i < p.value.rank(); ++i) detail::write_i64(out, p.value.dim(i));
    detail::write_raw(out, p.value.data().data(),
                      sizeof(double) * static_cast<size_t>(p.value.numel()));
  }
  if (!out) throw IoError("short write while saving checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[6];
  detail::read_raw(in, magic, 6);
  if (std::memcmp(magic, "DDBLR1", 6) != 0)
    throw ParseError("not a DDBLR1 checkpoint (magic/version mismatch): " + path);

  const std::uint32_t header_len = detail::read_u32(in);
  if (header_len > (1u << 20)) throw ParseError("checkpoint header is implausibly large");
  std::string header(header_len, '\0');
  detail::read_raw(in, header.data(), header_len);

  Checkpoint ckpt;
  bool saw_kind = false, saw_step = false, saw_digest = false;
  std::vector<std::pair<std::string, std::string>> net_entries;
  for (const std::string& raw : detail::split(header, '\n')) {
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint header: malformed line");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "kind") {
      ckpt.kind = value;
      saw_kind = true;
    } else if (key == "step") {
      ckpt.step = detail::parse_i64(value, key);
      saw_step = true;
    } else if (key == "digest") {
      ckpt.digest = value;
      saw_digest = true;
    } else if (key.rfind("net.", 0) == 0) {
      net_entries.emplace_back(key, value);
    } else {
      throw ParseError("checkpoint header: unknown key '" + key + "'");
    }
  }
  if (!saw_kind || !saw_step || !saw_digest)
    throw ParseError("checkpoint header is missing kind/step/digest");
  if (!net_entries.empty()) {
    FullConfig shim;
    for (const auto& [key, value] : net_entries) {
      try {
        apply_config_entry(shim, key, value);
      } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
      }
    }
    shim.net.validate();
    ckpt.net = shim.net;
    ckpt.has_net = true;
  }

  const std::uint32_t count = detail::read_u32(in);
  if (count > (1u << 20)) throw ParseError("checkpoint tensor count is implausible");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(in);
    if (name_len > (1u << 16)) throw ParseError("checkpoint tensor name is implausible");
    std::string name(name_len, '\0');
    detail::read_raw(in, name.data(), name_len);
    const std::uint32_t rank = detail::read_u32(in);
    if (rank < 1 || rank > 8) throw ParseError("checkpoint tensor rank out of range");
    std::vector<std::int64_t> shape(rank);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = detail::read_i64(in);
      if (d < 1 || d > (1LL << 32)) throw ParseError("checkpoint tensor dim out of range");
      numel *= d;
      if (numel > (1LL << 31)) throw ParseError("checkpoint tensor is implausibly large");
    }
    Tensor t = Tensor::zeros(shape);
    detail::read_raw(in, t.mutable_data().data(), sizeof(double) * static_cast<size_t>(numel));
    ckpt.tensors.push_back({std::move(name), std::move(t)});
  }
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0)
    throw ParseError("checkpoint has trailing bytes: " + path);
  return ckpt;
}

/// Network checkpoint snapshot: parameters in declared order, then the
/// optimizer accumulators as rms.<name>.
inline Checkpoint make_checkpoint(const DeepDeblurNet& net, const RmsState& state,
                                  std::int64_t step, const std::string& digest) {
  Checkpoint ckpt;
  ckpt.kind = checkpoint_kind::kNet;
  ckpt.has_net = true;
  ckpt.net = net.config();
  ckpt.step = step;
  ckpt.digest = digest;
  for (const Param& p : net.params()) ckpt.tensors.push_back({p.name, p.value.clone()});
  if (state.acc.size() != net.params().size())
    throw OptimizerError("checkpoint: optimizer state does not match parameters");
  for (size_t i = 0; i < state.acc.size(); ++i)
    ckpt.tensors.push_back({"rms." + net.params()[i].name, state.acc[i].clone()});
  return ckpt;
}

inline Checkpoint identity_checkpoint() {
  Checkpoint ckpt;
  ckpt.kind = checkpoint_kind::kIdentityStub;
  return ckpt;
}

/// Copies checkpoint parameters into a network of the identical layout.
inline void load_into_net(DeepDeblurNet& net, const Checkpoint& ckpt) {
  if (!ckpt.has_net) throw ConfigError("checkpoint carries no network parameters");
  if (!(ckpt.net == net.config()))
    throw ConfigError("checkpoint network layout differs from the target network");
  for (Param& p : net.params()) {
    const Tensor* stored = ckpt.find(p.name);
    if (!stored) throw ConfigError("checkpoint is missing parameter '" + p.name + "'");
    if (stored->shape() != p.value.shape())
      throw ConfigError("checkpoint parameter '" + p.name + "' has the wrong shape");
    p.value = stored->clone();
  }
}

inline DeepDeblurNet net_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.has_net) throw ConfigError("checkpoint carries no network parameters");
  DeepDeblurNet net = DeepDeblurNet::init(ckpt.net, 0);
  load_into_net(net, ckpt);
  return net;
}

/// Optimizer accumulators for these parameters; fresh zeros when the
/// checkpoint stores none (e.g. an untrained snapshot from another tool).
inline RmsState rms_state_from(const Checkpoint& ckpt, const std::vector<Param>& params) {
  size_t stored = 0;
  for (const Param& p : ckpt.tensors)
    if (p.name.rfind("rms.", 0) == 0) ++stored;
  RmsState state = RmsState::init(params);
  state.step = ckpt.step;
  if (stored == 0) return state;
  if (stored != params.size())
    throw ConfigError("checkpoint optimizer state is incomplete");
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor* t = ckpt.find("rms." + params[i].name);
    if (!t || t->shape() != params[i].value.shape())
      throw ConfigError("checkpoint optimizer state mismatch for '" + params[i].name + "'");
    state.acc[i] = t->clone();
  }
  return state;
}

/// Facial-extractor weights travel in the same container under their own
/// kind tag.
inline void save_extractor(const ProxyExtractor& phi, const std::string& path) {
  Checkpoint ckpt;
  ckpt.kind = checkpoint_kind::kProxyExtractor;
  for (const Param& p : phi.params()) ckpt.tensors.push_back({p.name, p.value.clone()});
  save_checkpoint(ckpt, path);
}

inline std::shared_ptr<FeatureExtractor> load_extractor(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != checkpoint_kind::kProxyExtractor)
    throw ConfigError("not an extractor checkpoint: kind '" + ckpt.kind + "'");
  return std::make_shared<ProxyExtractor>(std::move(ckpt.tensors));
}

/// Deterministic directory listing of the PNG dataset, every image checked
/// against the expected geometry.
inline std::vector<Image> load_dataset(const std::string& dir, std::int64_t height,
                                       std::int64_t width, int channels) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png") paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ConfigError("dataset: no PNG images in " + dir);
  std::vector<Image> images;
  images.reserve(paths.size());
  for (const std::string& p : paths) {
    Image img = load_png(p);
    if (img.height != height || img.width != width || img.channels != channels)
      throw ConfigError("dataset: " + p + " is " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + "x" + std::to_string(img.channels) +
                        ", expected " + std::to_string(height) + "x" + std::to_string(width) +
                        "x" + std::to_string(channels));
    images.push_back(std::move(img));
  }
  return images;
}

namespace detail {

inline std::string loss_log_path(const std::string& checkpoint_dir) {
  return (std::filesystem::path(checkpoint_dir) / "loss_log.csv").string();
}

inline constexpr const char* kLossLogHeader = "step,lr,l2,tv,face,total";

inline std::string format_log_row(std::int64_t step, double lr, const LossParts& parts) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<long long>(step), lr, parts.l2.item(), parts.tv.item(),
                parts.face.item(), parts.total.item());
  return buf;
}

/// First `rows` data rows of an existing loss log, plus their totals.
inline std::pair<std::vector<std::string>, std::vector<double>> read_loss_log(
    const std::string& path, std::int64_t rows) {
  std::ifstream in(path);
  if (!in) throw ConfigError("resume: loss log not found: " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kLossLogHeader)
    throw ParseError("resume: loss log header mismatch in " + path);
  std::vector<std::string> kept;
  std::vector<double> totals;
  while (static_cast<std::int64_t>(kept.size()) < rows && std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split(line, ',');
    if (fields.size() != 6) throw ParseError("resume: malformed loss log row");
    totals.push_back(parse_f64(fields[5], "loss log total"));
    kept.push_back(line);
  }
  if (static_cast<std::int64_t>(kept.size()) < rows)
    throw ConfigError("resume: loss log has fewer rows than the checkpoint step");
  return {std::move(kept), std::move(totals)};
}

}  // namespace detail

/// Runs the optimization loop: per step it draws a batch of sharp images,
/// degrades each with a freshly synthesized kernel, restores, applies the
/// combined objective, and takes one RMSProp step at the scheduled rate.
/// Appends one CSV row per step to <checkpoint_dir>/loss_log.csv, writes
/// periodic checkpoints, and returns the final one (also saved as final.ckpt).
/// Everything downstream of (dataset, cfg) is deterministic: batches and
/// kernels come from streams keyed by (seed, step, item).
///
/// Passing resume_from restarts from that checkpoint: the config digest must
/// match, the existing log supplies the loss history (so the learning-rate
/// schedule replays exactly), and rows from the checkpoint step onward are
/// discarded.
inline Checkpoint train(DeepDeblurNet& net, const std::string& dataset_dir,
                        const TrainConfig& cfg, const std::string& checkpoint_dir,
                        const std::string& resume_from = "") {
  cfg.validate();
  const std::string digest = train_config_digest(cfg);
  const std::vector<Image> dataset =
      load_dataset(dataset_dir, cfg.image_height, cfg.image_width, net.config().in_channels);

  std::filesystem::create_directories(checkpoint_dir);
  const std::string log_path = detail::loss_log_path(checkpoint_dir);
  const ProxyExtractor phi(cfg.extractor_seed, cfg.feature_dim, net.config().in_channels);

  RmsState state = RmsState::init(net.params());
  std::int64_t start_step = 0;
  std::vector<double> loss_history;
  std::vector<std::string> kept_rows;

  if (!resume_from.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume_from);
    if (ckpt.kind != checkpoint_kind::kNet)
      throw ConfigError("resume: checkpoint kind '" + ckpt.kind + "' is not a network");
    if (ckpt.digest != digest)
      throw ConfigError("resume: config digest mismatch (training settings changed)");
    load_into_net(net, ckpt);
    state = rms_state_from(ckpt, net.params());
    start_step = ckpt.step;
    auto [rows, totals] = detail::read_loss_log(log_path, start_step);
    kept_rows = std::move(rows);
    loss_history = std::move(totals);
  }

  {
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write loss log: " + log_path);
    log << detail::kLossLogHeader << "\n";
    for (const std::string& row : kept_rows) log << row << "\n";
  }
  std::ofstream log(log_path, std::ios::app);

  for (std::int64_t step = start_step; step < cfg.max_steps; ++step) {
    const double lr = lr_schedule(step, loss_history, cfg);

    std::vector<Image> blurry, sharp;
    blurry.reserve(static_cast<size_t>(cfg.batch_size));
    sharp.reserve(static_cast<size_t>(cfg.batch_size));
    for (std::int64_t item = 0; item < cfg.batch_size; ++item) {
      Rng pick = Rng::stream(cfg.seed, stream_id(stream_tag::kSampling,
                                                 static_cast<std::uint64_t>(step),
                                                 static_cast<std::uint64_t>(item)));
      const size_t index = static_cast<size_t>(pick.uniform_int(dataset.size()));
      Rng gen = Rng::stream(cfg.seed, stream_id(stream_tag::kKernel,
                                                static_cast<std::uint64_t>(step),
                                                static_cast<std::uint64_t>(item)));
      PairSample pair = make_pair(dataset[index], cfg.gp, cfg.noise_sigma, gen);
      blurry.push_back(std::move(pair.blurry));
      sharp.push_back(std::move(pair.sharp));
    }

    Tape tape;
    for (Param& p : net.params()) p.value = tape.watch(p.value);
    const Tensor restored = net.forward(to_tensor(blurry));
    const LossParts parts =
        total_loss_parts(restored, to_tensor(sharp), weights_at(cfg, step), phi);

    const double total = parts.total.item();
    if (!std::isfinite(total) || !std::isfinite(parts.l2.item()) ||
        !std::isfinite(parts.tv.item()) || !std::isfinite(parts.face.item()))
      throw OptimizerError(
          "train: non-finite loss at step " + std::to_string(step) + " (seed " +
          std::to_string(cfg.seed) + ", batch streams kernel:" +
          std::to_string(stream_id(stream_tag::kKernel, static_cast<std::uint64_t>(step), 0)) +
          "..+" + std::to_string(cfg.batch_size) + "); last lr " + detail::format_g17(lr));

    backward(parts.total);
    rmsprop_step(net.params(), state, lr, cfg.rms_decay, cfg.rms_eps);

    loss_history.push_back(total);
    log << detail::format_log_row(step, lr, parts) << "\n";
    log.flush();

    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 &&
        step + 1 < cfg.max_steps) {
      char name[40];
      std::snprintf(name, sizeof name, "ckpt_step%07lld.ckpt",
                    static_cast<long long>(step + 1));
      save_checkpoint(make_checkpoint(net, state, step + 1, digest),
                      (std::filesystem::path(checkpoint_dir) / name).string());
    }
  }

  Checkpoint final_ckpt = make_checkpoint(net, state, cfg.max_steps, digest);
  save_checkpoint(final_ckpt,
                  (std::filesystem::path(checkpoint_dir) / "final.ckpt").string());
  return final_ckpt;
}

}  // namespace deepdeblur
