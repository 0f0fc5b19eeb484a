#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <deepdeblur/losses.hpp>

using namespace deepdeblur;

namespace {

Tensor rand_unit(std::vector<int64_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("l2 loss is the elementwise mean of squared error", "[losses]") {
  Rng rng(3);
  Tensor a = rand_unit({2, 3, 4, 5}, rng);

  SECTION("identical inputs give exactly zero") {
    REQUIRE(l2_loss(a, a).item() == 0.0);
  }
  SECTION("a uniform offset d gives d squared") {
    Tensor b = Tensor::full(a.shape(), 0.25);
    Tensor c = Tensor::full(a.shape(), 0.55);
    REQUIRE(l2_loss(b, c).item() == Catch::Approx(0.09).margin(1e-15));
  }
  SECTION("random pair matches a scalar loop") {
    Tensor b = rand_unit(a.shape(), rng);
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double d = a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)];
      acc += d * d;
    }
    REQUIRE(std::abs(l2_loss(a, b).item() - acc / static_cast<double>(a.numel())) <= 1e-12);
  }
  SECTION("shape mismatch throws") {
    REQUIRE_THROWS_AS(l2_loss(a, rand_unit({2, 3, 5, 4}, rng)), DimensionError);
  }
}

TEST_CASE("tv loss sums squared forward differences", "[losses]") {
  SECTION("hand case: 2x2 grid [[0,1],[0,1]] scores exactly 2") {
    Tensor t = Tensor::from_data({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
    REQUIRE(tv_loss(t).item() == 2.0);
  }
  SECTION("constant image scores zero") {
    REQUIRE(tv_loss(Tensor::full({2, 3, 5, 5}, 0.7)).item() == 0.0);
  }
  SECTION("single row uses only horizontal differences") {
    Tensor t = Tensor::from_data({1, 1, 1, 3}, {0.0, 1.0, 3.0});
    REQUIRE(tv_loss(t).item() == Catch::Approx(5.0).margin(1e-12));
  }
  SECTION("channels add, batch averages") {
    Tensor one = Tensor::from_data({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
    Tensor two_channels =
        Tensor::from_data({1, 2, 2, 2}, {0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0});
    Tensor batch_of_two =
        Tensor::from_data({2, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0});
    REQUIRE(tv_loss(two_channels).item() == 2.0 * tv_loss(one).item());
    REQUIRE(tv_loss(batch_of_two).item() == tv_loss(one).item());
  }
  SECTION("degenerate 1x1 spatial input throws") {
    REQUIRE_THROWS_AS(tv_loss(Tensor::full({1, 3, 1, 1}, 0.5)), DimensionError);
  }
  SECTION("gradient matches finite differences") {
    Rng rng(11);
    Tensor at = rand_unit({2, 2, 4, 3}, rng);
    auto f = [](Tape&, const Tensor& probe) { return tv_loss(probe); };
    REQUIRE(finite_diff_check(f, at, 1e-5) <= 1e-6);
  }
}

TEST_CASE("facial loss measures batch-averaged feature distance", "[losses]") {
  Rng rng(17);
  auto phi = proxy_extractor(5, 12);
  Tensor a = rand_unit({2, 3, 12, 10}, rng);
  Tensor b = rand_unit({2, 3, 12, 10}, rng);

  SECTION("identical inputs give exactly zero") {
    REQUIRE(facial_loss(a, a, *phi).item() == 0.0);
  }
  SECTION("swapping the pair changes nothing") {
    REQUIRE(facial_loss(a, b, *phi).item() == facial_loss(b, a, *phi).item());
  }
  SECTION("distinct inputs are separated") {
    REQUIRE(facial_loss(a, b, *phi).item() > 0.0);
  }
  SECTION("gradient flows back to the prediction") {
    Tape tape;
    Tensor pred = tape.watch(a.clone());
    backward(facial_loss(pred, b, *phi));
    double norm = 0.0;
    for (double g : pred.grad()) norm += g * g;
    REQUIRE(norm > 0.0);
  }
  SECTION("gradient matches finite differences") {
    Tensor small = rand_unit({1, 3, 6, 6}, rng);
    Tensor target = rand_unit({1, 3, 6, 6}, rng);
    auto f = [&](Tape&, const Tensor& probe) { return facial_loss(probe, target, *phi); };
    REQUIRE(finite_diff_check(f, small, 1e-5) <= 1e-6);
  }
}

TEST_CASE("proxy extractor is a fixed deterministic embedder", "[losses]") {
  Rng rng(23);

  SECTION("feature length holds across input sizes") {
    auto phi = proxy_extractor(9, 7);
    for (auto hw : {std::pair<int64_t, int64_t>{8, 8}, {12, 10}, {31, 9}}) {
      Tensor f = phi->features(rand_unit({2, 3, hw.first, hw.second}, rng));
      REQUIRE(f.shape() == std::vector<int64_t>{2, 7, 1, 1});
    }
    REQUIRE(phi->feature_dim() == 7);
  }
  SECTION("same seed, same features; new seed, new features") {
    Tensor x = rand_unit({1, 3, 10, 10}, rng);
    Tensor f1 = proxy_extractor(4, 6)->features(x);
    Tensor f2 = proxy_extractor(4, 6)->features(x);
    Tensor f3 = proxy_extractor(5, 6)->features(x);
    REQUIRE(f1.data() == f2.data());
    REQUIRE(f1.data() != f3.data());
  }
  SECTION("weights survive a round trip through the named parameter list") {
    ProxyExtractor phi(8, 5);
    std::vector<Param> stored = phi.params();
    ProxyExtractor rebuilt(std::move(stored));
    Tensor x = rand_unit({1, 3, 9, 9}, rng);
    REQUIRE(phi.features(x).data() == rebuilt.features(x).data());
    REQUIRE(rebuilt.feature_dim() == 5);
  }
  SECTION("channel mismatch and bad configs throw") {
    auto phi = proxy_extractor(1, 4);
    REQUIRE_THROWS_AS(phi->features(rand_unit({1, 2, 8, 8}, rng)), DimensionError);
    REQUIRE_THROWS_AS(proxy_extractor(1, 0), ConfigError);
  }
}

TEST_CASE("total loss decomposes into its weighted parts", "[losses]") {
  Rng rng(31);
  auto phi = proxy_extractor(2, 8);
  Tensor pred = rand_unit({2, 3, 8, 8}, rng);
  Tensor target = rand_unit({2, 3, 8, 8}, rng);
  LossWeights w{0.3, 0.05};

  SECTION("total equals the manual weighted sum") {
    LossParts parts = total_loss_parts(pred, target, w, *phi);
    const double manual =
        parts.l2.item() + w.alpha * parts.tv.item() + w.beta * parts.face.item();
    REQUIRE(std::abs(parts.total.item() - manual) <= 1e-12);
    REQUIRE(parts.l2.item() >= 0.0);
    REQUIRE(parts.tv.item() >= 0.0);
    REQUIRE(parts.face.item() >= 0.0);
  }
  SECTION("zero weights reduce to the l2 term") {
    REQUIRE(total_loss(pred, target, LossWeights{0.0, 0.0}, *phi).item() ==
            l2_loss(pred, target).item());
  }
  SECTION("the weighted terms are positively homogeneous") {
    LossParts p1 = total_loss_parts(pred, target, w, *phi);
    LossParts p2 = total_loss_parts(pred, target, LossWeights{2 * w.alpha, 2 * w.beta}, *phi);
    REQUIRE(std::abs((p2.total.item() - p2.l2.item()) -
                     2.0 * (p1.total.item() - p1.l2.item())) <= 1e-12);
  }
  SECTION("matching pred and target leave only the tv term") {
    LossParts parts = total_loss_parts(target, target, w, *phi);
    REQUIRE(parts.l2.item() == 0.0);
    REQUIRE(parts.face.item() == 0.0);
    REQUIRE(parts.total.item() == Catch::Approx(w.alpha * parts.tv.item()).margin(1e-15));
  }
  SECTION("negative weights are rejected") {
    REQUIRE_THROWS_AS(total_loss(pred, target, LossWeights{-1.0, 0.0}, *phi), ConfigError);
  }
  SECTION("gradient of the full objective matches finite differences") {
    Tensor small_pred = rand_unit({1, 3, 6, 6}, rng);
    Tensor small_target = rand_unit({1, 3, 6, 6}, rng);
    auto f = [&](Tape&, const Tensor& probe) {
      return total_loss(probe, small_target, w, *phi);
    };
    REQUIRE(finite_diff_check(f, small_pred, 1e-5) <= 1e-6);
  }
}
