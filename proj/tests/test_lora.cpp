#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "fslora/errors.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/sketch.hpp"

using namespace fslora;

namespace {

struct Fixture {
  FrozenBase base;
  AdapterPair ad;
  Sketch s = Sketch::full(1);
};

Fixture random_fixture(size_t m, size_t n, uint32_t r, uint32_t k, RngStream& rng) {
  Fixture f;
  f.base.w0 = gaussian_matrix(m, n, 1.0, rng);
  f.ad.b = gaussian_matrix(m, r, 0.5, rng);
  f.ad.a = gaussian_matrix(r, n, 0.5, rng);
  f.s = k == r ? Sketch::full(r) : sample_random_k({r, k}, rng);
  return f;
}

}  // namespace

TEST_CASE("init_adapters: zero b, Gaussian(0, 1/rank) a, identity start") {
  RngStream rng = RngStream(42).derive("adapter-init");
  AdapterPair ad = init_adapters(6, 9, 4, rng);
  REQUIRE(ad.b.rows() == 6);
  REQUIRE(ad.b.cols() == 4);
  REQUIRE(ad.a.rows() == 4);
  REQUIRE(ad.a.cols() == 9);
  CHECK(ad.shapes_ok());
  CHECK(ad.rank() == 4);
  CHECK(ad.b == Matrix(6, 4));  // exactly zero

  RngStream oracle = RngStream(42).derive("adapter-init");
  CHECK(ad.a == gaussian_matrix(4, 9, 1.0 / 4.0, oracle));

  FrozenBase base{gaussian_matrix(6, 9, 1.0, rng)};
  CHECK(effective_weight(base, ad, Sketch::full(4)) == base.w0);
}

// ============================================================================
// Dense-diagonal oracles: the compact sketched paths must reproduce the
// defining products element for element
// ============================================================================

TEST_CASE("effective_weight equals w0 + (b S) a computed densely") {
  RngStream rng(501);
  for (int trial = 0; trial < 30; ++trial) {
    const size_t m = 1 + rng.next_below(8);
    const size_t n = 1 + rng.next_below(8);
    const uint32_t r = 1 + static_cast<uint32_t>(rng.next_below(6));
    const uint32_t k = 1 + static_cast<uint32_t>(rng.next_below(r));
    Fixture f = random_fixture(m, n, r, k, rng);
    Matrix want = add(f.base.w0, matmul(apply_right(f.ad.b, f.s), f.ad.a));
    REQUIRE(effective_weight(f.base, f.ad, f.s) == want);
  }
}

TEST_CASE("adapter_grads equals the dense chain rule with exact sparsity") {
  RngStream rng(502);
  for (int trial = 0; trial < 30; ++trial) {
    const size_t m = 1 + rng.next_below(8);
    const size_t n = 1 + rng.next_below(8);
    const uint32_t r = 1 + static_cast<uint32_t>(rng.next_below(6));
    const uint32_t k = 1 + static_cast<uint32_t>(rng.next_below(r));
    Fixture f = random_fixture(m, n, r, k, rng);
    Matrix g = gaussian_matrix(m, n, 1.0, rng);

    AdapterGrads got = adapter_grads(g, f.ad, f.s);
    Matrix want_gb = apply_right(matmul(g, transpose(f.ad.a)), f.s);
    Matrix want_ga = apply_left(matmul(transpose(f.ad.b), g), f.s);
    REQUIRE(got.gb == want_gb);
    REQUIRE(got.ga == want_ga);

    for (uint32_t j = 0; j < r; ++j) {
      if (f.s.contains(j)) continue;
      for (size_t i = 0; i < m; ++i) CHECK(got.gb(i, j) == 0.0);
      for (size_t i = 0; i < n; ++i) CHECK(got.ga(j, i) == 0.0);
    }
  }
}

TEST_CASE("shape mismatches are rejected") {
  RngStream rng(503);
  Fixture f = random_fixture(4, 5, 3, 2, rng);
  FrozenBase wrong{Matrix(5, 5)};
  CHECK_THROWS_AS(effective_weight(wrong, f.ad, f.s), ShapeError);
  CHECK_THROWS_AS(effective_weight(f.base, f.ad, Sketch::full(4)), ShapeError);
  CHECK_THROWS_AS(adapter_grads(Matrix(4, 4), f.ad, f.s), ShapeError);
  AdapterPair bad = f.ad;
  bad.a = Matrix(2, 5);
  CHECK_THROWS_AS(adapter_grads(Matrix(4, 5), bad, f.s), ShapeError);
}

// ============================================================================
// SGD step
// ============================================================================

TEST_CASE("sgd_step applies -lr and leaves zero-gradient entries bit-identical") {
  RngStream rng(504);
  Fixture f = random_fixture(5, 6, 4, 2, rng);
  Matrix g = gaussian_matrix(5, 6, 1.0, rng);
  AdapterGrads grads = adapter_grads(g, f.ad, f.s);

  AdapterPair next = sgd_step(f.ad, grads, 0.1);
  Matrix want_b = f.ad.b;
  add_scaled_inplace(want_b, -0.1, grads.gb);
  Matrix want_a = f.ad.a;
  add_scaled_inplace(want_a, -0.1, grads.ga);
  CHECK(next.b == want_b);
  CHECK(next.a == want_a);

  for (uint32_t j = 0; j < 4; ++j) {
    if (f.s.contains(j)) continue;
    for (size_t i = 0; i < 5; ++i) {
      CHECK(std::memcmp(&next.b(i, j), &f.ad.b(i, j), sizeof(double)) == 0);
    }
    for (size_t i = 0; i < 6; ++i) {
      CHECK(std::memcmp(&next.a(j, i), &f.ad.a(j, i), sizeof(double)) == 0);
    }
  }
}

TEST_CASE("sgd_step rejects bad rates and non-finite gradients") {
  RngStream rng(505);
  Fixture f = random_fixture(3, 3, 2, 2, rng);
  AdapterGrads grads{Matrix(3, 2), Matrix(2, 3)};
  CHECK_THROWS_AS(sgd_step(f.ad, grads, 0.0), RangeError);
  CHECK_THROWS_AS(sgd_step(f.ad, grads, -1.0), RangeError);
  grads.gb(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sgd_step(f.ad, grads, 0.1), NumericalError);
  AdapterGrads wrong{Matrix(3, 3), Matrix(2, 3)};
  CHECK_THROWS_AS(sgd_step(f.ad, wrong, 0.1), ShapeError);
}

// ============================================================================
// Delta extraction and densification
// ============================================================================

TEST_CASE("extract_delta gathers exactly the sketched difference") {
  RngStream rng(506);
  const size_t m = 6, n = 4;
  const uint32_t r = 5;
  Sketch s({r, 2}, {1, 3});
  Fixture f = random_fixture(m, n, r, r, rng);
  f.s = s;

  AdapterPair after = f.ad;
  for (size_t i = 0; i < m; ++i) {
    after.b(i, 1) += 0.25;
    after.b(i, 3) -= 1.5;
  }
  for (size_t i = 0; i < n; ++i) after.a(3, i) += 2.0;

  SparseDelta d = extract_delta(f.ad, after, s);
  CHECK(d.r == r);
  CHECK(d.m == m);
  CHECK(d.n == n);
  CHECK(d.indices == std::vector<uint32_t>{1, 3});
  for (size_t i = 0; i < m; ++i) {
    CHECK(d.b_col(0)[i] == after.b(i, 1) - f.ad.b(i, 1));
    CHECK(d.b_col(1)[i] == after.b(i, 3) - f.ad.b(i, 3));
  }
  for (size_t i = 0; i < n; ++i) {
    CHECK(d.a_row(0)[i] == 0.0);  // a row 1 untouched
    CHECK(d.a_row(1)[i] == after.a(3, i) - f.ad.a(3, i));
  }

  DenseDelta dense = densify(d);
  CHECK(dense.db == sub(after.b, f.ad.b));
  CHECK(dense.da == sub(after.a, f.ad.a));
}

TEST_CASE("a change outside the index set is a contract violation") {
  RngStream rng(507);
  Fixture f = random_fixture(4, 4, 4, 4, rng);
  Sketch s({4, 2}, {0, 2});

  AdapterPair leak_b = f.ad;
  leak_b.b(2, 1) += 1e-9;  // column 1 is outside
  CHECK_THROWS_AS(extract_delta(f.ad, leak_b, s), ContractError);

  AdapterPair leak_a = f.ad;
  leak_a.a(3, 0) -= 1e-9;  // row 3 is outside
  CHECK_THROWS_AS(extract_delta(f.ad, leak_a, s), ContractError);

  AdapterPair shrunk = f.ad;
  shrunk.b = Matrix(4, 3);
  CHECK_THROWS_AS(extract_delta(f.ad, shrunk, s), ShapeError);
  CHECK_THROWS_AS(extract_delta(f.ad, f.ad, Sketch::full(3)), ShapeError);
}

TEST_CASE("densify round-trips a hand-built delta") {
  SparseDelta d;
  d.r = 3;
  d.m = 2;
  d.n = 2;
  d.indices = {0, 2};
  d.b_cols = {1.0, 2.0, 3.0, 4.0};  // column 0 then column 2
  d.a_rows = {5.0, 6.0, 7.0, 8.0};  // row 0 then row 2
  DenseDelta dense = densify(d);
  CHECK(dense.db(0, 0) == 1.0);
  CHECK(dense.db(1, 0) == 2.0);
  CHECK(dense.db(0, 2) == 3.0);
  CHECK(dense.db(1, 2) == 4.0);
  CHECK(dense.db(0, 1) == 0.0);
  CHECK(dense.da(0, 0) == 5.0);
  CHECK(dense.da(0, 1) == 6.0);
  CHECK(dense.da(2, 0) == 7.0);
  CHECK(dense.da(2, 1) == 8.0);
  CHECK(dense.da(1, 0) == 0.0);
}
