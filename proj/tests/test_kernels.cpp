#include <doctest.h>

#include <cstddef>
#include <string>
#include <vector>

#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"
#include "fslora/rng.hpp"

using namespace fslora;

namespace {

// Independent per-element oracle: C[i][j] accumulates a[i][p]*b[p][j] over
// ascending p. The kernels' i-k-j loop performs exactly this operation
// sequence per output element, so results must match bit for bit.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
  return c;
}

// The documented reduction contract: lane L sums elements L, L+4, ..., the
// tail accumulates separately, combine as ((l0+l1)+(l2+l3))+tail.
double dot_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double lane[4] = {0, 0, 0, 0};
  size_t n4 = x.size() & ~size_t{3};
  for (size_t i = 0; i < n4; ++i) lane[i % 4] += x[i] * y[i];
  double tail = 0.0;
  for (size_t i = n4; i < x.size(); ++i) tail += x[i] * y[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + tail;
}

double naive_ltr_dot(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

std::vector<double> random_vec(size_t n, RngStream& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.next_gaussian();
  return v;
}

std::vector<const kern::Ops*> available_tables() {
  std::vector<const kern::Ops*> tables{&kern::scalar()};
  if (kern::avx2() != nullptr) tables.push_back(kern::avx2());
  if (kern::neon() != nullptr) tables.push_back(kern::neon());
  return tables;
}

}  // namespace

TEST_CASE("matmul matches the per-element ascending-k oracle bitwise") {
  RngStream rng(101);
  const size_t shapes[][3] = {{1, 1, 1}, {1, 5, 1}, {3, 1, 4},  {2, 3, 2},
                              {4, 4, 4}, {5, 7, 3}, {7, 2, 9},  {8, 8, 8},
                              {9, 13, 5}, {16, 16, 16}, {17, 5, 11}, {3, 32, 6}};
  for (const kern::Ops* ops : available_tables()) {
    for (const auto& sh : shapes) {
      size_t m = sh[0], k = sh[1], n = sh[2];
      std::vector<double> a = random_vec(m * k, rng);
      std::vector<double> b = random_vec(k * n, rng);
      std::vector<double> c(m * n, -1.0);
      ops->matmul(a.data(), b.data(), c.data(), m, k, n);
      std::vector<double> want = matmul_oracle(a, b, m, k, n);
      REQUIRE(c == want);  // vector<double> equality: every element identical
    }
  }
}

TEST_CASE("axpy and scale match elementwise oracles bitwise") {
  RngStream rng(102);
  for (const kern::Ops* ops : available_tables()) {
    for (size_t n : {size_t{0}, size_t{1}, size_t{3}, size_t{4}, size_t{5},
                     size_t{8}, size_t{13}, size_t{32}, size_t{33}}) {
      std::vector<double> x = random_vec(n, rng);
      std::vector<double> y = random_vec(n, rng);
      const double alpha = 0.37;

      std::vector<double> want = y;
      for (size_t i = 0; i < n; ++i) want[i] += alpha * x[i];
      std::vector<double> got = y;
      ops->axpy(alpha, x.data(), got.data(), n);
      CHECK(got == want);

      std::vector<double> want2(n);
      for (size_t i = 0; i < n; ++i) want2[i] = -1.91 * x[i];
      std::vector<double> got2(n, 7.0);
      ops->scale(-1.91, x.data(), got2.data(), n);
      CHECK(got2 == want2);
    }
  }
}

TEST_CASE("dot and sum_sq realize the 4-lane reduction pattern bitwise") {
  RngStream rng(103);
  for (const kern::Ops* ops : available_tables()) {
    for (size_t n : {size_t{0}, size_t{1}, size_t{2}, size_t{3}, size_t{4}, size_t{5},
                     size_t{7}, size_t{8}, size_t{9}, size_t{16}, size_t{17}, size_t{33}}) {
      std::vector<double> x = random_vec(n, rng);
      std::vector<double> y = random_vec(n, rng);
      CHECK(ops->dot(x.data(), y.data(), n) == dot_oracle(x, y));
      CHECK(ops->sum_sq(x.data(), n) == dot_oracle(x, x));
    }
  }
}

TEST_CASE("the lane pattern is observable, not a vacuous re-sum") {
  // Chosen so the 4-lane combine rounds differently from a left-to-right sum:
  // left to right, each tiny term is absorbed into 1.0; in lanes they first
  // add to each other and only then meet the 1.0.
  std::vector<double> x{1.0, 1e-16, 1e-16, 1e-16};
  std::vector<double> y{1.0, 1.0, 1.0, 1.0};
  REQUIRE(dot_oracle(x, y) != naive_ltr_dot(x, y));
  for (const kern::Ops* ops : available_tables()) {
    CHECK(ops->dot(x.data(), y.data(), x.size()) == dot_oracle(x, y));
  }
}

TEST_CASE("simd variants agree with scalar on every kernel") {
  RngStream rng(104);
  std::vector<const kern::Ops*> tables = available_tables();
  const kern::Ops& ref = kern::scalar();
  for (size_t t = 1; t < tables.size(); ++t) {
    const kern::Ops* ops = tables[t];
    for (int trial = 0; trial < 25; ++trial) {
      size_t m = 1 + rng.next_below(12);
      size_t k = 1 + rng.next_below(12);
      size_t n = 1 + rng.next_below(12);
      std::vector<double> a = random_vec(m * k, rng);
      std::vector<double> b = random_vec(k * n, rng);
      std::vector<double> c1(m * n), c2(m * n);
      ref.matmul(a.data(), b.data(), c1.data(), m, k, n);
      ops->matmul(a.data(), b.data(), c2.data(), m, k, n);
      REQUIRE(c1 == c2);
      CHECK(ref.dot(a.data(), b.data(), std::min(a.size(), b.size())) ==
            ops->dot(a.data(), b.data(), std::min(a.size(), b.size())));
      CHECK(ref.sum_sq(a.data(), a.size()) == ops->sum_sq(a.data(), a.size()));
    }
  }
}

TEST_CASE("kernel selection and parsing") {
  CHECK(kern::parse_kind("scalar") == kern::Kind::Scalar);
  CHECK(kern::parse_kind("avx2") == kern::Kind::Avx2);
  CHECK(kern::parse_kind("neon") == kern::Kind::Neon);
  CHECK(kern::parse_kind("auto") == kern::Kind::Auto);
  CHECK_THROWS_AS(kern::parse_kind("sse9"), ConfigError);

  kern::select(kern::Kind::Scalar);
  CHECK(std::string(kern::active_name()) == "scalar");
  CHECK(kern::active().matmul == kern::scalar().matmul);

  if (kern::avx2() != nullptr) {
    kern::select(kern::Kind::Avx2);
    CHECK(std::string(kern::active_name()) == "avx2");
  } else {
    CHECK_THROWS_AS(kern::select(kern::Kind::Avx2), ConfigError);
  }
  if (kern::neon() == nullptr) {
    CHECK_THROWS_AS(kern::select(kern::Kind::Neon), ConfigError);
  }
  kern::select(kern::Kind::Auto);  // restore default for other tests
}
