#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <numeric>

#include "sbmoe/errors.hpp"
#include "sbmoe/numerics.hpp"

using namespace sbmoe;
using doctest::Approx;

TEST_CASE("softmax of [1, 2, 3]") {
  const Vector p = softmax(Vector{1.0, 2.0, 3.0});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(p[i] == Approx(std::exp(i + 1.0) / z).epsilon(1e-15));
  CHECK(p[0] == Approx(0.09003057).epsilon(1e-7));
  CHECK(p[1] == Approx(0.24472847).epsilon(1e-7));
  CHECK(p[2] == Approx(0.66524096).epsilon(1e-7));
}

TEST_CASE("softmax is shift invariant and survives large logits") {
  const Vector a = softmax(Vector{1000.0, 1001.0, 1002.0});
  const Vector b = softmax(Vector{0.0, 1.0, 2.0});
  for (int i = 0; i < 3; ++i) CHECK(a[i] == Approx(b[i]).epsilon(1e-14));
  const Vector single = softmax(Vector{-7.5});
  CHECK(single[0] == 1.0);
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_AS(softmax(Vector{}), ShapeError);
  CHECK_THROWS_AS(softmax(Vector{1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(softmax(Vector{1.0, std::numeric_limits<double>::infinity()}), NumericError);
}

TEST_CASE("activations") {
  CHECK(softplus(-1.0) == Approx(0.3132617).epsilon(1e-7));
  CHECK(softplus(-1.0) == Approx(std::log1p(std::exp(-1.0))).epsilon(1e-15));
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(gelu(1.0) == Approx(0.8411920).epsilon(1e-7));
  CHECK(gelu(0.0) == 0.0);
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(-800.0) == Approx(0.0));
}

TEST_CASE("gelu derivative matches central differences") {
  for (double x : {-3.0, -1.0, -0.2, 0.0, 0.4, 1.0, 2.5}) {
    const double h = 1e-6;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    CHECK(gelu_derivative(x) == Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("matrix helpers") {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(matvec(m, Vector{1, 0, -1}) == Vector{-2, -2});
  CHECK(matvec_transposed(m, Vector{1, 1}) == Vector{5, 7, 9});
  Matrix acc(2, 2);
  add_outer(acc, Vector{1, 2}, Vector{3, 4}, 0.5);
  CHECK(acc == Matrix::from_rows({{1.5, 2}, {3, 4}}));
  CHECK(Matrix::identity(2) == Matrix::from_rows({{1, 0}, {0, 1}}));
  CHECK_THROWS_AS(matvec(m, Vector{1, 2}), ShapeError);
  Vector y{1, 1};
  axpy(2.0, Vector{1, -1}, y);
  CHECK(y == Vector{3, -1});
  CHECK(norm(Vector{3, 4}) == 5.0);
}

TEST_CASE("order invariant sum ignores permutation bit-exactly") {
  SeededRng rng(7);
  Vector terms(200);
  for (double& t : terms) t = gaussian(rng) * std::pow(10.0, gaussian(rng) * 4);
  const double reference = order_invariant_sum(terms);
  for (int trial = 0; trial < 20; ++trial) {
    shuffle(terms, rng);
    CHECK(order_invariant_sum(terms) == reference);
  }
}

TEST_CASE("rng streams are reproducible and independent") {
  SeededRng a(42, 0);
  SeededRng b(42, 0);
  SeededRng c(42, 1);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  SeededRng u(3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    CHECK(u.uniform_index(7) < 7);
  }
}

TEST_CASE("gaussian moments over 1e5 draws") {
  SeededRng rng(42);
  constexpr int kDraws = 100000;
  double sum = 0.0;
  double sq = 0.0;
  for (int i = 0; i < kDraws; ++i) {
    const double g = gaussian(rng);
    sum += g;
    sq += g * g;
  }
  const double mean = sum / kDraws;
  const double var = sq / kDraws - mean * mean;
  CHECK(std::abs(mean) <= 0.02);
  CHECK(std::abs(var - 1.0) <= 0.03);
}

TEST_CASE("shuffle is a permutation") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  SeededRng rng(1);
  shuffle(v, rng);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("finite differences") {
  const auto quadratic = [](std::span<const double> p) { return p[0] * p[0] + 3 * p[0] * p[1]; };
  const Vector g = finite_difference_gradient(quadratic, Vector{1.0, 2.0}, 1e-5);
  CHECK(g[0] == Approx(8.0).epsilon(1e-9));
  CHECK(g[1] == Approx(3.0).epsilon(1e-9));

  const auto cubic = [](std::span<const double> p) { return p[0] * p[0] * p[0]; };
  // Central differences carry an h^2 f'''/6 = h^2 term for x^3.
  CHECK(finite_difference_gradient(cubic, Vector{2.0}, 1e-3)[0] == Approx(12.0 + 1e-6).epsilon(1e-10));

  CHECK_THROWS_AS(finite_difference_gradient(quadratic, Vector{1.0, 2.0}, 0.0), ConfigError);
  const auto blowup = [](std::span<const double> p) { return 1.0 / (p[0] - 1e-6); };
  CHECK_THROWS_AS(finite_difference_gradient(blowup, Vector{0.0}, 1e-6), NumericError);
  CHECK(all_finite(Vector{1, 2}));
  CHECK_FALSE(all_finite(Vector{1, std::nan("")}));
}
