#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sharc/core.hpp"

using namespace sharc;

// Reference values evaluated at 50 digits with an arbitrary-precision library.
constexpr double kLn2 = 0.6931471805599453;
constexpr double kLn4 = 1.3862943611198906;
constexpr double kOnePlusHalfLn4 = 1.6931471805599453;
constexpr double kLnOnePlusE = 1.3132616875182228;

TEST_CASE("tensor3 indexing is channels-last and validates length") {
  Tensor3 t({2, 3, 4});
  CHECK(t.size() == 24);
  t(1, 2, 3) = 5.0;
  CHECK(t.flat()[((1 * 3) + 2) * 4 + 3] == 5.0);
  CHECK_THROWS_AS(Tensor3({2, 2, 2}, Vec(7)), std::invalid_argument);
  Tensor3 bad({1, 1, 1}, Vec{NAN});
  CHECK_FALSE(bad.all_finite());
}

TEST_CASE("softmax examples") {
  auto a = softmax(Vec{0, 0});
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));
  auto b = softmax(Vec{1, 1, 1}, 7.0);
  for (double v : b) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto c = softmax(Vec{0, std::log(3.0)});
  CHECK(std::abs(c[0] - 0.25) < 1e-15);
  CHECK(std::abs(c[1] - 0.75) < 1e-15);
  CHECK_THROWS_WITH(softmax(Vec{}), "empty input");
  CHECK_THROWS(softmax(Vec{1.0}, 0.0));
}

TEST_CASE("softmax properties on random vectors") {
  RngStream rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Vec v(1 + rng.below(20));
    for (auto& x : v) x = 50.0 * rng.normal();
    const double beta = 0.1 + 10.0 * rng.uniform();
    auto p = softmax(v, beta);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    Vec shifted = v;
    for (auto& x : shifted) x += 123.0;
    auto q = softmax(shifted, beta);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-12);
  }
}

TEST_CASE("lse examples and bounds") {
  CHECK(std::abs(lse(1.0, Vec{0, 0}) - kLn2) < 1e-15);
  CHECK(std::abs(lse(1000.0, Vec{0, 5}) - 5.0) < 1e-3);
  CHECK(std::abs(lse(2.0, Vec{1, 1, 1, 1}) - kOnePlusHalfLn4) < 1e-15);
  CHECK(std::isfinite(lse(1e4, Vec{1e3, -1e3})));
  CHECK_THROWS(lse(1.0, Vec{}));
  CHECK_THROWS(lse(-1.0, Vec{1.0}));

  RngStream rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    Vec v(1 + rng.below(10));
    for (auto& x : v) x = 10.0 * rng.normal();
    const double beta = 0.1 + 5.0 * rng.uniform();
    const double mx = *std::max_element(v.begin(), v.end());
    const double l = lse(beta, v);
    CHECK(l >= mx - 1e-12);
    CHECK(l <= mx + std::log(static_cast<double>(v.size())) / beta + 1e-12);
  }
}

TEST_CASE("lse gradient equals softmax by central differences") {
  RngStream rng(7);
  const double h = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    Vec v(2 + rng.below(8));
    for (auto& x : v) x = rng.normal();
    const double beta = 0.5 + 3.0 * rng.uniform();
    const auto p = softmax(v, beta);
    for (std::size_t i = 0; i < v.size(); ++i) {
      Vec up = v, dn = v;
      up[i] += h;
      dn[i] -= h;
      const double fd = (lse(beta, up) - lse(beta, dn)) / (2 * h);
      CHECK(std::abs(fd - p[i]) <= 1e-5 * std::max(1.0, std::abs(p[i])));
    }
  }
}

TEST_CASE("quantile threshold examples") {
  CHECK(quantile_threshold(Vec{1, 2, 3, 4}, 0.5) == 2.0);
  CHECK(quantile_threshold(Vec{7}, 0.9) == 7.0);
  CHECK(quantile_threshold(Vec{0.1, 0.9, 0.5, 0.2}, 0.25) == 0.1);
  CHECK(quantile_threshold(Vec{3, 1, 2}, 1.0) == 3.0);
  CHECK(quantile_threshold(Vec{3, 1, 2}, 0.0) == 1.0);
}

TEST_CASE("quantile threshold is permutation invariant and monotone in mu") {
  RngStream rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Vec v(1 + rng.below(30));
    for (auto& x : v) x = static_cast<double>(rng.below(5));  // plenty of ties
    Vec p = v;
    rng.shuffle(std::span<double>(p));
    double prev = -INFINITY;
    for (int k = 0; k <= 20; ++k) {
      const double mu = k / 20.0;
      const double q = quantile_threshold(v, mu);
      CHECK(q == quantile_threshold(p, mu));
      CHECK(q >= prev);
      prev = q;
    }
  }
}

TEST_CASE("cross entropy examples") {
  CHECK(std::abs(cross_entropy(Vec{0, 0, 0, 0}, 2) - kLn4) < 1e-15);
  CHECK(cross_entropy(Vec{10, -10}, 0) <= 1e-6);
  CHECK(cross_entropy(Vec{10, -10}, 0) >= 0.0);
  CHECK(std::abs(cross_entropy(Vec{1, 2}, 0) - kLnOnePlusE) < 1e-14);
  CHECK_THROWS_AS(cross_entropy(Vec{1, 2}, 2), std::out_of_range);
}

TEST_CASE("rng streams are reproducible and tag-independent") {
  RngStream a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 10000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(a.draws() == 10000);

  RngStream p(1);
  const auto d1 = p.derive(5);
  p.next_u64();
  auto d2 = p.derive(5);
  auto d1c = d1;
  CHECK(d1c.next_u64() == d2.next_u64());
  auto e = p.derive(6);
  auto d3 = p.derive(5);
  CHECK(e.next_u64() != d3.next_u64());
}

TEST_CASE("rng draws have sane moments") {
  RngStream r(9);
  const int n = 100000;
  double su = 0, sn = 0, sn2 = 0;
  std::vector<int> counts(7, 0);
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
    counts[r.below(7)]++;
  }
  CHECK(std::abs(su / n - 0.5) < 0.005);
  CHECK(std::abs(sn / n) < 0.015);
  CHECK(std::abs(sn2 / n - 1.0) < 0.02);
  for (int c : counts) CHECK(std::abs(c - n / 7.0) < 4.0 * std::sqrt(n / 7.0));
}

TEST_CASE("sample_indices without and with replacement") {
  RngStream r(10);
  auto s = sample_indices(r, 10, 10);
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(s[i] == i);
  auto w = sample_indices(r, 3, 12);
  CHECK(w.size() == 12);
  for (auto i : w) CHECK(i < 3);
  CHECK_THROWS(sample_indices(r, 0, 1));
}

TEST_CASE("vector helpers") {
  Vec a{1, 2, 3}, b{4, 5, 6};
  CHECK(dot(a, b) == 32.0);
  CHECK(squared_norm(a) == 14.0);
  CHECK(norm(Vec{3, 4}) == 5.0);
  axpy(2.0, a, b);
  CHECK(b == Vec{6, 9, 12});
  CHECK_FALSE(all_finite(Vec{1, INFINITY}));
}
