#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include <deepdeblur/model.hpp>

#include "support/tempdir.hpp"

using namespace deepdeblur;

namespace {

NetworkConfig small_config(bool reduction = true) {
  NetworkConfig cfg;
  cfg.num_modules = 2;
  cfg.base_channels = 16;
  cfg.scales = {1, 3, 5};
  cfg.pointwise_reduction = reduction;
  return cfg;
}

Tensor rand_signed(std::vector<int64_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) {
    const double mag = rng.uniform(0.1, 1.1);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

void zero_params_matching(DeepDeblurNet& net, const std::string& needle) {
  for (Param& p : net.params())
    if (p.name.find(needle) != std::string::npos)
      std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.0);
}

}  // namespace

TEST_CASE("parameter count matches hand arithmetic", "[model]") {
  SECTION("full-scale default") {
    REQUIRE(parameter_count(NetworkConfig{}) == 1'845'120);
  }
  SECTION("reduction off grows every branch that is not pointwise") {
    NetworkConfig cfg;
    cfg.pointwise_reduction = false;
    // stem 1728 + 6 * (32*64*(1+9+25+49+196) + 64*160) + 192
    REQUIRE(parameter_count(cfg) == 3'504'000);
    REQUIRE(parameter_count(cfg) > parameter_count(NetworkConfig{}));
  }
  SECTION("toy layout") {
    NetworkConfig cfg;
    cfg.num_modules = 2;
    cfg.base_channels = 16;
    cfg.scales = {1, 3};
    // stem 432 + 2 * (merge 256 + (128+64) + (128+576)) + output 48
    REQUIRE(parameter_count(cfg) == 2784);
  }
  SECTION("bad configs are rejected") {
    NetworkConfig cfg;
    cfg.num_modules = 0;
    REQUIRE_THROWS_AS(parameter_count(cfg), ConfigError);
    cfg = NetworkConfig{};
    cfg.base_channels = 63;  // odd with reduction on
    REQUIRE_THROWS_AS(parameter_count(cfg), ConfigError);
    cfg = NetworkConfig{};
    cfg.scales = {3, 0};
    REQUIRE_THROWS_AS(parameter_count(cfg), ConfigError);
  }
}

TEST_CASE("init draws the audited weight set deterministically", "[model]") {
  const NetworkConfig cfg = small_config();
  DeepDeblurNet net = DeepDeblurNet::init(cfg, 7);

  int64_t total = 0;
  for (const Param& p : net.params()) total += p.value.numel();
  REQUIRE(total == parameter_count(cfg));

  SECTION("names are unique and bracketed by stem and output") {
    std::vector<std::string> names;
    for (const Param& p : net.params()) names.push_back(p.name);
    REQUIRE(names.front() == "stem");
    REQUIRE(names.back() == "output");
    std::sort(names.begin(), names.end());
    REQUIRE(std::adjacent_find(names.begin(), names.end()) == names.end());
  }

  SECTION("weights respect the fan-in bound") {
    for (const Param& p : net.params()) {
      const double bound =
          1.0 / std::sqrt(static_cast<double>(p.value.dim(1) * p.value.dim(2) * p.value.dim(3)));
      for (double v : p.value.data()) {
        REQUIRE(v >= -bound);
        REQUIRE(v < bound);
      }
    }
  }

  SECTION("same seed reproduces, another seed does not") {
    DeepDeblurNet again = DeepDeblurNet::init(cfg, 7);
    DeepDeblurNet other = DeepDeblurNet::init(cfg, 8);
    bool any_differs = false;
    for (size_t i = 0; i < net.params().size(); ++i) {
      REQUIRE(bitwise_equal(net.params()[i].value, again.params()[i].value));
      any_differs = any_differs || !bitwise_equal(net.params()[i].value, other.params()[i].value);
    }
    REQUIRE(any_differs);
  }
}

TEST_CASE("a module with a zeroed inner path is the identity", "[model]") {
  Rng rng(19);
  NetworkConfig cfg = small_config(GENERATE(true, false));
  cfg.num_modules = 1;
  DeepDeblurNet net = DeepDeblurNet::init(cfg, 5);
  Tensor x = rand_signed({2, cfg.base_channels, 9, 7}, rng);

  SECTION("zeroed merge") { zero_params_matching(net, ".merge"); }
  SECTION("zeroed branch convs") { zero_params_matching(net, ".conv"); }

  REQUIRE(bitwise_equal(net.module_forward(0, x), x));
}

TEST_CASE("forward preserves batch and spatial shape", "[model]") {
  Rng rng(23);
  const NetworkConfig cfg = small_config();
  DeepDeblurNet net = DeepDeblurNet::init(cfg, 1);

  for (int trial = 0; trial < 4; ++trial) {
    const int64_t h = 5 + static_cast<int64_t>(rng.uniform_int(28));
    const int64_t w = 5 + static_cast<int64_t>(rng.uniform_int(28));
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(2));
    Tensor y = net.forward(rand_signed({n, 3, h, w}, rng));
    REQUIRE(y.shape() == std::vector<int64_t>{n, 3, h, w});
  }

  SECTION("full-scale topology keeps shape too") {
    DeepDeblurNet full = DeepDeblurNet::init(NetworkConfig{}, 1);
    Tensor y = full.forward(rand_signed({1, 3, 16, 14}, rng));
    REQUIRE(y.shape() == std::vector<int64_t>{1, 3, 16, 14});
  }

  SECTION("inputs below the largest scale are rejected") {
    REQUIRE_THROWS_AS(net.forward(rand_signed({1, 3, 4, 9}, rng)), DimensionError);
  }
  SECTION("wrong channel count is rejected") {
    REQUIRE_THROWS_AS(net.forward(rand_signed({1, 2, 9, 9}, rng)), DimensionError);
    REQUIRE_THROWS_AS(net.module_forward(0, rand_signed({1, 5, 9, 9}, rng)), DimensionError);
  }
}

TEST_CASE("branch geometry follows the reduction switch", "[model]") {
  const DeepDeblurNet on = DeepDeblurNet::init(small_config(true), 2);
  const DeepDeblurNet off = DeepDeblurNet::init(small_config(false), 2);
  const int64_t base = 16, half = 8;

  auto find = [](const DeepDeblurNet& net, const std::string& name) -> const Tensor* {
    for (const Param& p : net.params())
      if (p.name == name) return &p.value;
    return nullptr;
  };

  for (int s : {1, 3, 5}) {
    const std::string conv = "module0.scale" + std::to_string(s) + ".conv";
    const std::string reduce = "module0.scale" + std::to_string(s) + ".reduce";

    REQUIRE(find(on, conv) != nullptr);
    REQUIRE(find(on, reduce) != nullptr);
    REQUIRE(find(off, conv) != nullptr);
    REQUIRE(find(on, conv)->shape() == std::vector<int64_t>{half, half, s, s});
    REQUIRE(find(on, reduce)->shape() == std::vector<int64_t>{half, base, 1, 1});
    REQUIRE(find(off, conv)->shape() == std::vector<int64_t>{half, base, s, s});
    REQUIRE(find(off, reduce) == nullptr);

    const int64_t on_branch = find(on, conv)->numel() + find(on, reduce)->numel();
    const int64_t off_branch = find(off, conv)->numel();
    if (s >= 3)
      REQUIRE(off_branch > on_branch);  // reduction pays off past pointwise scales
    else
      REQUIRE(on_branch > off_branch);
  }
}

TEST_CASE("forward is bitwise deterministic", "[model]") {
  Rng rng(31);
  DeepDeblurNet net = DeepDeblurNet::init(small_config(), 11);
  Tensor x = rand_signed({2, 3, 10, 12}, rng);
  REQUIRE(bitwise_equal(net.forward(x), net.forward(x)));
}

TEST_CASE("network gradients agree with finite differences", "[model]") {
  Rng rng(47);
  NetworkConfig cfg;
  cfg.num_modules = 1;
  cfg.base_channels = 4;
  cfg.scales = {1, 3};
  cfg.in_channels = 2;
  cfg.out_channels = 2;
  DeepDeblurNet net = DeepDeblurNet::init(cfg, 9);
  Tensor x = rand_signed({1, 2, 5, 5}, rng);

  SECTION("with respect to the input") {
    auto f = [&](Tape&, const Tensor& probe) {
      return mean_all(square(net.forward(probe)));
    };
    REQUIRE(finite_diff_check(f, x, 1e-5) <= 1e-6);
  }

  SECTION("with respect to each parameter tensor") {
    for (size_t i = 0; i < net.params().size(); ++i) {
      auto f = [&, i](Tape&, const Tensor& probe) {
        DeepDeblurNet probed = net;
        probed.params()[i].value = probe;
        return mean_all(square(probed.forward(x)));
      };
      INFO("parameter " << net.params()[i].name);
      REQUIRE(finite_diff_check(f, net.params()[i].value, 1e-5) <= 1e-6);
    }
  }
}

TEST_CASE("feature map sheets land one per scale", "[model]") {
  oracles::TempDir dir;
  NetworkConfig cfg = small_config();
  cfg.base_channels = 8;
  cfg.scales = {1, 3};
  DeepDeblurNet net = DeepDeblurNet::init(cfg, 3);

  Image img = Image::create(12, 10, 3);
  Rng rng(55);
  for (double& v : img.data) v = rng.uniform();

  const auto paths = dump_feature_maps(net, img, 1, dir.file("maps"));
  REQUIRE(paths.size() == 2);

  // 4 maps per scale tile into a 2x2 sheet with 1px separators.
  for (const auto& p : paths) {
    Image sheet = load_png(p);
    REQUIRE(sheet.channels == 1);
    REQUIRE(sheet.height == 2 * 13 - 1);
    REQUIRE(sheet.width == 2 * 11 - 1);
  }

  SECTION("scales respond differently to the same input") {
    Image a = load_png(paths[0]), b = load_png(paths[1]);
    REQUIRE(a.data != b.data);
  }

  SECTION("constant input renders mid-gray maps") {
    Image flat = Image::create(12, 10, 3, 0.4);
    const auto flat_paths = dump_feature_maps(net, flat, 0, dir.file("flat"));
    Image sheet = load_png(flat_paths[0]);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 10; ++x)
        REQUIRE(std::abs(sheet.at(0, y, x) - 0.5) < 0.003);
  }

  SECTION("module index is validated") {
    REQUIRE_THROWS_AS(dump_feature_maps(net, img, 2, dir.file("bad")), DimensionError);
  }
}
