#include <cmath>
#include <limits>
#include <numeric>

#include "atelier/errors.hpp"
#include "atelier/ops.hpp"
#include "atelier/rng.hpp"
#include "atelier/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace atelier;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(v));
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Weighted sum with fixed pseudo-random weights, so every output element
// influences the scalar differently.
Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  return sum(mul(t, random_tensor(t.shape(), seed)));
}

}  // namespace

TEST_SUITE("tensor_autodiff") {

TEST_CASE("tensor invariants") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor({2, 3}, {1, 2}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}, {}), DimensionError);
  CHECK_FALSE(t.has_grad());
  Tensor view = t;
  CHECK(view.same_storage(t));
  Tensor copy = t.detach();
  CHECK_FALSE(copy.same_storage(t));
}

TEST_CASE("matmul examples") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(values(matmul(a, eye)) == std::vector<double>{1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(values(matmul(a, b)) == std::vector<double>{19, 22, 43, 50});
  const Tensor z = matmul(Tensor::zeros({3, 4}), random_tensor({4, 2}, 1));
  CHECK(z.shape() == Shape{3, 2});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
    CHECK(what.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees with the definition on ragged sizes") {
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {7, 13, 37}, {5, 64, 17}, {33, 9, 48}, {4, 3, 8}}) {
    const Tensor a = random_tensor({std::size_t(m), std::size_t(k)}, m * 100 + k);
    const Tensor b = random_tensor({std::size_t(k), std::size_t(n)}, k * 100 + n);
    const auto expect = oracle::matmul(values(a), values(b), m, k, n);
    const auto got = values(matmul(a, b));
    REQUIRE(got.size() == expect.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::fabs(got[i] - expect[i]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("elementwise examples") {
  const Tensor x = random_tensor({3, 4}, 2);
  CHECK(values(add(x, Tensor::zeros({3, 4}))) == values(x));
  for (const Tensor t = sigmoid(Tensor::zeros({2, 5})); double v : t.data()) CHECK(v == 0.5);
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(oracle::gelu(1.0)).epsilon(1e-14));
  CHECK(gelu_value(1.0) == doctest::Approx(oracle::gelu(1.0)).epsilon(1e-14));
  CHECK(gelu_value(1.0) == doctest::Approx(0.8411919906082768).epsilon(1e-13));
  CHECK(elementwise(Elementwise::scale, x, 2.5).at(3) == x.at(3) * 2.5);
  CHECK_THROWS_AS(add(x, Tensor::zeros({4, 3})), DimensionError);
  CHECK_THROWS_AS(mul(x, Tensor::zeros({3, 5})), DimensionError);
}

TEST_CASE("gelu matches its closed form across the range") {
  for (double x = -12.0; x <= 12.0; x += 0.037) {
    CHECK(std::fabs(gelu_value(x) - oracle::gelu(x)) <= 1e-14);
  }
}

TEST_CASE("layer_norm examples") {
  const Tensor ones = Tensor::full({1, 4}, 1.0);
  const Tensor zeros = Tensor::zeros({1, 4});
  for (const Tensor t = layer_norm(Tensor::full({1, 4}, 3.7), ones, zeros); double v : t.data()) CHECK(v == 0.0);

  const Tensor pm = layer_norm(Tensor({1, 2}, {1, -1}), Tensor::full({1, 2}, 1.0), Tensor::zeros({1, 2}), 1e-14);
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pm.at(1) == doctest::Approx(-1.0).epsilon(1e-12));

  const std::size_t d = 37;
  const Tensor x = random_tensor({5, d}, 3, 4.0);
  const Tensor y = layer_norm(x, Tensor::full({1, d}, 1.0), Tensor::zeros({1, d}), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += y.at(r, c);
    mean /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    var /= d;
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(std::fabs(var - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(layer_norm(x, Tensor::full({1, 3}, 1.0), Tensor::zeros({1, 3})), DimensionError);
}

TEST_CASE("softmax rows sum to one") {
  const Tensor x = random_tensor({9, 31}, 4, 30.0);
  const Tensor p = softmax(x);
  for (std::size_t r = 0; r < 9; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 31; ++c) s += p.at(r, c);
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross-entropy examples") {
  const std::vector<int> one{3};
  CHECK(softmax_cross_entropy(Tensor::zeros({1, 10}), one, -1).item() == doctest::Approx(std::log(10.0)).epsilon(1e-15));

  std::vector<double> peaked(10, 0.0);
  peaked[3] = 1000.0;
  CHECK(softmax_cross_entropy(Tensor({1, 10}, peaked), one, -1).item() < 1e-12);

  const double direct = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const std::vector<int> two{2};
  CHECK(softmax_cross_entropy(Tensor({1, 3}, {1, 2, 3}), two, -1).item() == doctest::Approx(direct).epsilon(1e-14));

  const std::vector<int> mixed{-1, 2, -1};
  const Tensor rows({3, 3}, {9, 9, 9, 1, 2, 3, -4, 0, 4});
  CHECK(softmax_cross_entropy(rows, mixed, -1).item() == doctest::Approx(direct).epsilon(1e-14));

  const std::vector<int> none{-1, -1, -1};
  CHECK_THROWS_AS(softmax_cross_entropy(rows, none, -1), NumericalError);
  const std::vector<int> out_of_range{0, 7, 1};
  CHECK_THROWS(softmax_cross_entropy(rows, out_of_range, -1));
}

TEST_CASE("backward examples") {
  Tensor x({4}, {1.5, -2.0, 0.25, 3.0}, true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0 * x.at(i));

  Tensor frozen = random_tensor({3, 2}, 5);
  Tensor w({3, 2}, values(random_tensor({3, 2}, 6)), true);
  backward(sum(mul(frozen, w)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(w.has_grad());

  Tensor v({2, 2}, {1, 2, 3, 4}, true);
  CHECK_THROWS_AS(backward(mul(v, v)), ContractError);
}

TEST_CASE("sum(matmul(x, W)) gradient matches finite differences") {
  const Tensor w = random_tensor({5, 3}, 8);
  const auto f = [&](const Tensor& x) { return sum(matmul(x, w)); };
  CHECK(grad_check(f, random_tensor({4, 5}, 7), 1e-5) < 1e-5);
}

TEST_CASE("a consumed graph refuses a second backward") {
  Tensor x({3}, {1, 2, 3}, true);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), ContractError);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("leaf gradients accumulate across graphs until zero_grad") {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  CHECK(x.grad()[1] == 8.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
  backward(sum(x));
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("shared operands sum their gradient contributions") {
  Tensor x({2}, {3, -1}, true);
  backward(sum(add(mul(x, x), scale(x, 4.0))));
  CHECK(x.grad()[0] == 2 * 3 + 4);
  CHECK(x.grad()[1] == -2 + 4);
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
  CHECK(grad_enabled());
}

TEST_CASE("grad_check examples") {
  const auto linear_sum = [](const Tensor& x) { return sum(x); };
  CHECK(grad_check(linear_sum, random_tensor({3, 3}, 9)) < 1e-10);

  const auto cube = [](const Tensor& x) { return sum(mul(mul(x, x), x)); };
  CHECK(grad_check(cube, Tensor({2}, {1, 2}), 1e-5) < 1e-6);
  Tensor x({2}, {1, 2}, true);
  backward(cube(x));
  CHECK(x.grad()[0] == 3.0);
  CHECK(x.grad()[1] == 12.0);
  double xs[2] = {1.0, 2.0};
  for (int i = 0; i < 2; ++i) {
    const auto f = [&] { return xs[0] * xs[0] * xs[0] + xs[1] * xs[1] * xs[1]; };
    CHECK(std::fabs(oracle::central_difference(f, xs[i], 1e-5) - x.grad()[i]) < 1e-6);
  }

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return mul(t, t); }, Tensor({2}, {1, 2})), ContractError);
  CHECK_THROWS_AS(grad_check(linear_sum, Tensor({2}, {1, 2}), 0.0), ContractError);
}

TEST_CASE("every primitive passes the finite-difference check") {
  const Tensor b = random_tensor({4, 5}, 11);
  const Tensor w = random_tensor({6, 5}, 12);
  const Tensor bias = random_tensor({1, 6}, 13);
  const Tensor gamma = random_tensor({1, 5}, 14);
  const Tensor beta = random_tensor({1, 5}, 15);
  const std::vector<int> targets{2, -1, 0, 4};
  const std::vector<int> ids{3, 0, 3, 1, 5};

  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Shape shape;
  };
  const std::vector<Case> cases = {
      {"matmul", [&](const Tensor& x) { return weighted_sum(matmul(x, random_tensor({5, 3}, 16))); }, {4, 5}},
      {"matmul rhs", [&](const Tensor& x) { return weighted_sum(matmul(b, x)); }, {5, 3}},
      {"linear", [&](const Tensor& x) { return weighted_sum(linear(x, w, bias)); }, {4, 5}},
      {"linear weight", [&](const Tensor& x) { return weighted_sum(linear(b, x, bias)); }, {6, 5}},
      {"linear bias", [&](const Tensor& x) { return weighted_sum(linear(b, w, x)); }, {1, 6}},
      {"add", [&](const Tensor& x) { return weighted_sum(add(x, b)); }, {4, 5}},
      {"add scalar", [&](const Tensor& x) { return weighted_sum(add(x, 0.7)); }, {4, 5}},
      {"mul", [&](const Tensor& x) { return weighted_sum(mul(x, b)); }, {4, 5}},
      {"mul self", [&](const Tensor& x) { return weighted_sum(mul(x, x)); }, {4, 5}},
      {"scale", [&](const Tensor& x) { return weighted_sum(scale(x, -1.3)); }, {4, 5}},
      {"gelu", [&](const Tensor& x) { return weighted_sum(gelu(x)); }, {4, 5}},
      {"sigmoid", [&](const Tensor& x) { return weighted_sum(sigmoid(x)); }, {4, 5}},
      {"abs", [&](const Tensor& x) { return weighted_sum(abs(x)); }, {4, 5}},
      {"layer_norm", [&](const Tensor& x) { return weighted_sum(layer_norm(x, gamma, beta)); }, {4, 5}},
      {"layer_norm gamma", [&](const Tensor& x) { return weighted_sum(layer_norm(b, x, beta)); }, {1, 5}},
      {"layer_norm beta", [&](const Tensor& x) { return weighted_sum(layer_norm(b, gamma, x)); }, {1, 5}},
      {"softmax", [&](const Tensor& x) { return weighted_sum(softmax(x)); }, {4, 5}},
      {"cross_entropy", [&](const Tensor& x) { return softmax_cross_entropy(x, targets, -1); }, {4, 5}},
      {"attention", [&](const Tensor& x) { return weighted_sum(causal_self_attention(x, 2)); }, {5, 12}},
      {"embedding", [&](const Tensor& x) { return weighted_sum(embedding(x, ids)); }, {6, 5}},
      {"concat_rows", [&](const Tensor& x) { return weighted_sum(concat_rows(x, b)); }, {3, 5}},
      {"concat_rows lower", [&](const Tensor& x) { return weighted_sum(concat_rows(b, x)); }, {2, 5}},
      {"select_row", [&](const Tensor& x) { return weighted_sum(select_row(x, 2)); }, {4, 5}},
      {"sum", [&](const Tensor& x) { return sum(x); }, {4, 5}},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(grad_check(c.f, random_tensor(c.shape, ++seed), 1e-5) < 1e-4);
  }
}

TEST_CASE("forward outputs stay finite for inputs up to 1e3 in magnitude") {
  Rng rng(21);
  std::vector<double> v(6 * 12);
  for (auto& x : v) x = rng.uniform(-1e3, 1e3);
  v[0] = 1e3;
  v[1] = -1e3;
  const Tensor x({6, 12}, v);
  const Tensor g = Tensor::full({1, 12}, 1.0);
  const Tensor z = Tensor::zeros({1, 12});
  const std::vector<int> targets{0, 1, 2, 3, 4, 5};
  const std::vector<Tensor> outs = {gelu(x), sigmoid(x), softmax(x), layer_norm(x, g, z),
                                    causal_self_attention(x, 2), softmax_cross_entropy(x, targets, -1),
                                    matmul(x, random_tensor({12, 3}, 22)), abs(x)};
  for (const auto& t : outs)
    for (double y : t.data()) CHECK(std::isfinite(y));
}

TEST_CASE("causal attention ignores later positions") {
  const Tensor qkv = random_tensor({6, 12}, 23);
  auto changed = values(qkv);
  for (std::size_t c = 0; c < 12; ++c) changed[5 * 12 + c] += 3.0;
  const Tensor a = causal_self_attention(qkv, 2);
  const Tensor b = causal_self_attention(Tensor({6, 12}, changed), 2);
  for (std::size_t i = 0; i < 5 * 4; ++i) CHECK(a.at(i) == b.at(i));
  CHECK(a.at(5 * 4) != b.at(5 * 4));
  CHECK_THROWS_AS(causal_self_attention(qkv, 3), DimensionError);
}

}  // TEST_SUITE
