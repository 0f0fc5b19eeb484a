#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <deepdeblur/tensor.hpp>

#include "support/oracles.hpp"

using namespace deepdeblur;

namespace {

// Uniform values in ±[0.1, 1.1): keeps finite differences away from the
// leaky ReLU kink at zero.
Tensor rand_signed(std::vector<int64_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) {
    const double mag = rng.uniform(0.1, 1.1);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace

TEST_CASE("conv2d matches the seven-loop direct oracle", "[tensor]") {
  Rng rng(42);

  SECTION("odd kernel") {
    Tensor x = rand_signed({1, 2, 5, 5}, rng);
    Tensor w = rand_signed({3, 2, 3, 3}, rng);
    REQUIRE(oracles::max_abs_diff(conv2d(x, w), oracles::conv2d_direct(x, w)) <= 1e-12);
  }
  SECTION("even kernel pads asymmetrically") {
    Tensor x = rand_signed({2, 3, 6, 5}, rng);
    Tensor w = rand_signed({2, 3, 4, 4}, rng);
    REQUIRE(oracles::max_abs_diff(conv2d(x, w), oracles::conv2d_direct(x, w)) <= 1e-12);
  }
  SECTION("stride two") {
    Tensor x = rand_signed({1, 2, 7, 6}, rng);
    Tensor w = rand_signed({4, 2, 3, 3}, rng);
    Tensor got = conv2d(x, w, 2);
    REQUIRE(got.shape() == std::vector<int64_t>{1, 4, 4, 3});
    REQUIRE(oracles::max_abs_diff(got, oracles::conv2d_direct(x, w, 2)) <= 1e-12);
  }
  SECTION("1x1 kernel scaling identity") {
    Tensor x = rand_signed({1, 1, 3, 3}, rng);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
    Tensor y = conv2d(x, w);
    for (size_t i = 0; i < y.data().size(); ++i)
      REQUIRE(y.data()[i] == Catch::Approx(2.0 * x.data()[i]).margin(0.0));
  }
  SECTION("delta kernel is the identity") {
    Tensor x = rand_signed({1, 1, 6, 7}, rng);
    Tensor w = Tensor::zeros({1, 1, 3, 3});
    w.mutable_data()[4] = 1.0;
    REQUIRE(oracles::max_abs_diff(conv2d(x, w), x) <= 1e-12);
  }
}

TEST_CASE("conv2d is linear in the image", "[tensor]") {
  Rng rng(7);
  Tensor x = rand_signed({1, 2, 6, 6}, rng);
  Tensor y = rand_signed({1, 2, 6, 6}, rng);
  Tensor w = rand_signed({3, 2, 3, 3}, rng);
  const double a = 1.7, b = -0.4;
  Tensor combo = add(scale(x, a), scale(y, b));
  Tensor lhs = conv2d(combo, w);
  Tensor rhs = add(scale(conv2d(x, w), a), scale(conv2d(y, w), b));
  REQUIRE(oracles::max_abs_diff(lhs, rhs) <= 1e-10);
}

TEST_CASE("elementwise ops and reductions", "[tensor]") {
  SECTION("leaky_relu definition") {
    Tensor x = Tensor::from_data({2}, {1.0, -1.0});
    Tensor y = leaky_relu(x, 0.01);
    REQUIRE(y.data()[0] == 1.0);
    REQUIRE(y.data()[1] == -0.01);
  }
  SECTION("leaky_relu passes nonnegative input through") {
    Rng rng(3);
    Tensor x = Tensor::uniform({2, 3}, 0.0, 5.0, rng);
    Tensor y = leaky_relu(x, 0.2);
    REQUIRE(y.data() == x.data());
  }
  SECTION("add with zeros is the identity") {
    Rng rng(4);
    Tensor x = rand_signed({3, 2}, rng);
    REQUIRE(add(x, Tensor::zeros({3, 2})).data() == x.data());
  }
  SECTION("mean_all of 1..4") {
    REQUIRE(mean_all(Tensor::from_data({4}, {1, 2, 3, 4})).item() == 2.5);
  }
  SECTION("concat preserves parts in order") {
    Tensor a = Tensor::full({1, 2, 2, 2}, 1.0);
    Tensor b = Tensor::full({1, 3, 2, 2}, 2.0);
    Tensor c = concat_channels({a, b});
    REQUIRE(c.shape() == std::vector<int64_t>{1, 5, 2, 2});
    for (int i = 0; i < 8; ++i) REQUIRE(c.data()[static_cast<size_t>(i)] == 1.0);
    for (int i = 8; i < 20; ++i) REQUIRE(c.data()[static_cast<size_t>(i)] == 2.0);
  }
  SECTION("mean_hw averages each channel plane") {
    Tensor x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor m = mean_hw(x);
    REQUIRE(m.shape() == std::vector<int64_t>{1, 2, 1, 1});
    REQUIRE(m.data()[0] == 2.5);
    REQUIRE(m.data()[1] == 25.0);
  }
}

TEST_CASE("backward populates gradients", "[tensor]") {
  SECTION("grad of sum is all ones") {
    Tape tape;
    Tensor x = tape.watch(Tensor::from_data({2, 3}, {1, -2, 3, 4, -5, 6}));
    backward(sum_all(x));
    for (double g : x.grad()) REQUIRE(g == 1.0);
  }
  SECTION("grad of sum of squares is 2x") {
    Tape tape;
    Tensor x = tape.watch(Tensor::from_data({1}, {3.0}));
    backward(sum_all(square(x)));
    REQUIRE(x.grad()[0] == 6.0);
  }
  SECTION("repeated backward without reset is rejected") {
    Tape tape;
    Tensor x = tape.watch(Tensor::scalar(2.0));
    Tensor loss = square(x);
    backward(loss);
    REQUIRE_THROWS_AS(backward(loss), AutodiffError);
    tape.reset();
  }
  SECTION("non-scalar loss is rejected") {
    Tape tape;
    Tensor x = tape.watch(Tensor::from_data({2}, {1.0, 2.0}));
    Tensor y = square(x);
    REQUIRE_THROWS_AS(backward(y), DimensionError);
  }
  SECTION("detached tensor is rejected") {
    Tensor x = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(backward(x), AutodiffError);
  }
  SECTION("operands from different tapes are rejected") {
    Tape ta, tb;
    Tensor a = ta.watch(Tensor::scalar(1.0));
    Tensor b = tb.watch(Tensor::scalar(2.0));
    REQUIRE_THROWS_AS(add(a, b), AutodiffError);
  }
}

TEST_CASE("gradients are bitwise reproducible", "[tensor]") {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    Tensor x = tape.watch(rand_signed({1, 2, 6, 6}, rng));
    Tensor w = tape.watch(rand_signed({3, 2, 3, 3}, rng));
    Tensor loss = mean_all(square(leaky_relu(conv2d(x, w), 0.01)));
    backward(loss);
    std::vector<double> grads = x.grad();
    grads.insert(grads.end(), w.grad().begin(), w.grad().end());
    return grads;
  };
  REQUIRE(run() == run());
}

TEST_CASE("finite_diff_check itself", "[tensor]") {
  SECTION("sum of squares") {
    Rng rng(11);
    Tensor at = rand_signed({2, 3}, rng);
    double err = finite_diff_check(
        [](Tape&, const Tensor& x) { return sum_all(square(x)); }, at, 1e-5);
    REQUIRE(err <= 1e-8);
  }
  SECTION("constant function has zero error") {
    double err = finite_diff_check(
        [](Tape&, const Tensor& x) { return scale(sum_all(x), 0.0); },
        Tensor::from_data({3}, {1, 2, 3}), 1e-5);
    REQUIRE(err == 0.0);
  }
  SECTION("conv2d weights against finite differences") {
    Rng rng(12);
    Tensor x = rand_signed({1, 1, 5, 5}, rng);
    Tensor w0 = rand_signed({2, 1, 3, 3}, rng);
    double err = finite_diff_check(
        [&x](Tape&, const Tensor& w) { return mean_all(square(conv2d(x, w))); }, w0,
        1e-5);
    REQUIRE(err <= 1e-6);
  }
}

TEST_CASE("differentiable ops pass finite-difference checks", "[tensor][grad]") {
  const double h = 1e-5, tol = 1e-4;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor x = rand_signed({1, 2, 5, 4}, rng);
    Tensor other = rand_signed({1, 2, 5, 4}, rng);
    Tensor w_odd = rand_signed({3, 2, 3, 3}, rng);
    Tensor w_even = rand_signed({2, 2, 4, 4}, rng);

    auto check = [&](const char* name,
                     const std::function<Tensor(Tape&, const Tensor&)>& f,
                     const Tensor& at) {
      INFO("op: " << name << " seed: " << seed);
      REQUIRE(finite_diff_check(f, at, h) <= tol);
    };

    check("add", [&](Tape&, const Tensor& t) { return sum_all(square(add(t, other))); }, x);
    check("sub", [&](Tape&, const Tensor& t) { return sum_all(square(sub(t, other))); }, x);
    check("scale", [&](Tape&, const Tensor& t) { return sum_all(scale(t, -1.3)); }, x);
    check("square", [&](Tape&, const Tensor& t) { return mean_all(square(t)); }, x);
    check("leaky_relu",
          [&](Tape&, const Tensor& t) { return sum_all(square(leaky_relu(t, 0.01))); }, x);
    check("sum_all", [&](Tape&, const Tensor& t) { return sum_all(t); }, x);
    check("mean_all", [&](Tape&, const Tensor& t) { return mean_all(t); }, x);
    check("mean_hw",
          [&](Tape&, const Tensor& t) { return sum_all(square(mean_hw(t))); }, x);
    check("concat_channels",
          [&](Tape&, const Tensor& t) {
            return sum_all(square(concat_channels({t, square(t)})));
          },
          x);
    check("conv2d/input",
          [&](Tape&, const Tensor& t) { return mean_all(square(conv2d(t, w_odd))); }, x);
    check("conv2d/weight",
          [&](Tape&, const Tensor& t) { return mean_all(square(conv2d(x, t))); }, w_odd);
    check("conv2d/even-kernel",
          [&](Tape&, const Tensor& t) { return mean_all(square(conv2d(x, t))); }, w_even);
    check("conv2d/stride2",
          [&](Tape&, const Tensor& t) { return mean_all(square(conv2d(t, w_odd, 2))); },
          x);
  }
}
