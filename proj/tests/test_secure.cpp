#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "fslora/errors.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/secure_agg.hpp"
#include "fslora/sketch.hpp"

using namespace fslora;

namespace {

constexpr uint32_t kR = 6;
constexpr uint32_t kM = 3;
constexpr uint32_t kN = 4;

Sketch make_sketch(std::vector<uint32_t> idx) {
  const auto k = static_cast<uint32_t>(idx.size());
  return Sketch(SketchSpec{kR, k}, std::move(idx));
}

SparseDelta make_delta(int id, std::vector<uint32_t> idx, RngStream& rng) {
  SparseDelta d;
  d.client_id = id;
  d.round = 9;
  d.r = kR;
  d.m = kM;
  d.n = kN;
  d.indices = std::move(idx);
  d.b_cols.resize(d.indices.size() * kM);
  d.a_rows.resize(d.indices.size() * kN);
  for (double& v : d.b_cols) v = rng.next_gaussian();
  for (double& v : d.a_rows) v = rng.next_gaussian();
  return d;
}

}  // namespace

// ============================================================================
// Mask derivation
// ============================================================================

TEST_CASE("pair masks live on sketch intersections and rebuild bit for bit") {
  const std::vector<int> ids{0, 1, 2};
  const std::vector<Sketch> sketches{make_sketch({0, 1, 3}), make_sketch({1, 3, 5}),
                                     make_sketch({0, 3, 5})};

  MaskSet ms = derive_masks(ids, sketches, kM, kN, 1.5, 42, 9);
  REQUIRE(ms.pairs.size() == 3);
  CHECK(ms.pairs[0].i == 0);
  CHECK(ms.pairs[0].j == 1);
  CHECK(ms.pairs[0].indices == std::vector<uint32_t>{1, 3});
  CHECK(ms.pairs[1].i == 0);
  CHECK(ms.pairs[1].j == 2);
  CHECK(ms.pairs[1].indices == std::vector<uint32_t>{0, 3});
  CHECK(ms.pairs[2].i == 1);
  CHECK(ms.pairs[2].j == 2);
  CHECK(ms.pairs[2].indices == std::vector<uint32_t>{3, 5});
  for (const PairMask& pm : ms.pairs) {
    CHECK(pm.b_cols.size() == pm.indices.size() * kM);
    CHECK(pm.a_rows.size() == pm.indices.size() * kN);
  }
  REQUIRE(ms.per_client.size() == 3);
  for (size_t t = 0; t < 3; ++t) {
    CHECK(ms.per_client[t].client_id == ids[t]);
    CHECK(ms.per_client[t].shift.indices == sketches[t].indices());
  }

  MaskSet again = derive_masks(ids, sketches, kM, kN, 1.5, 42, 9);
  for (size_t p = 0; p < 3; ++p) {
    CHECK(again.pairs[p].b_cols == ms.pairs[p].b_cols);
    CHECK(again.pairs[p].a_rows == ms.pairs[p].a_rows);
  }
  for (size_t t = 0; t < 3; ++t) {
    CHECK(again.per_client[t].shift.b_cols == ms.per_client[t].shift.b_cols);
    CHECK(again.per_client[t].shift.a_rows == ms.per_client[t].shift.a_rows);
  }

  // Any of (seed, round) changes the masks; stddev scales them.
  MaskSet other_seed = derive_masks(ids, sketches, kM, kN, 1.5, 43, 9);
  CHECK(other_seed.pairs[0].b_cols != ms.pairs[0].b_cols);
  MaskSet other_round = derive_masks(ids, sketches, kM, kN, 1.5, 42, 10);
  CHECK(other_round.pairs[0].b_cols != ms.pairs[0].b_cols);
  MaskSet doubled = derive_masks(ids, sketches, kM, kN, 3.0, 42, 9);
  for (size_t x = 0; x < ms.pairs[0].b_cols.size(); ++x) {
    CHECK(doubled.pairs[0].b_cols[x] == 2.0 * ms.pairs[0].b_cols[x]);
  }

  CHECK_THROWS_AS(derive_masks(ids, {sketches[0], sketches[1]}, kM, kN, 1.0, 42, 9), ShapeError);
}

TEST_CASE("two-client shifts are exact negations on a shared sketch") {
  const std::vector<int> ids{4, 7};
  const Sketch shared = make_sketch({0, 2, 5});
  MaskSet ms = derive_masks(ids, {shared, shared}, kM, kN, 2.0, 99, 3);

  REQUIRE(ms.pairs.size() == 1);
  CHECK(ms.pairs[0].i == 4);
  CHECK(ms.pairs[0].j == 7);
  CHECK(ms.pairs[0].indices == shared.indices());

  const SparseDelta& r0 = ms.per_client[0].shift;
  const SparseDelta& r1 = ms.per_client[1].shift;
  REQUIRE(r0.b_cols.size() == r1.b_cols.size());
  for (size_t x = 0; x < r0.b_cols.size(); ++x) CHECK(r0.b_cols[x] == -r1.b_cols[x]);
  for (size_t x = 0; x < r0.a_rows.size(); ++x) CHECK(r0.a_rows[x] == -r1.a_rows[x]);
  // The shift is the pair mask itself on this side.
  CHECK(r0.b_cols == ms.pairs[0].b_cols);
  CHECK(r0.a_rows == ms.pairs[0].a_rows);
}

// ============================================================================
// Masking uploads
// ============================================================================

TEST_CASE("mask_delta adds entrywise on the shared support only") {
  RngStream rng(901);
  SparseDelta d = make_delta(0, {1, 3, 4}, rng);

  ClientMask cm;
  cm.client_id = 0;
  cm.shift.client_id = 0;
  cm.shift.round = 9;
  cm.shift.r = kR;
  cm.shift.m = kM;
  cm.shift.n = kN;
  cm.shift.indices = {1, 4};
  cm.shift.b_cols = {10, 20, 30, 40, 50, 60};          // two columns of 3
  cm.shift.a_rows = {1, 2, 3, 4, 5, 6, 7, 8};          // two rows of 4

  SparseDelta masked = mask_delta(d, cm);
  CHECK(masked.indices == d.indices);
  for (uint32_t x = 0; x < kM; ++x) {
    CHECK(masked.b_col(0)[x] == d.b_col(0)[x] + cm.shift.b_col(0)[x]);  // index 1
    CHECK(masked.b_col(1)[x] == d.b_col(1)[x]);                        // index 3 untouched
    CHECK(masked.b_col(2)[x] == d.b_col(2)[x] + cm.shift.b_col(1)[x]);  // index 4
  }
  for (uint32_t x = 0; x < kN; ++x) {
    CHECK(masked.a_row(0)[x] == d.a_row(0)[x] + cm.shift.a_row(0)[x]);
    CHECK(masked.a_row(1)[x] == d.a_row(1)[x]);
    CHECK(masked.a_row(2)[x] == d.a_row(2)[x] + cm.shift.a_row(1)[x]);
  }

  ClientMask outside = cm;
  outside.shift.indices = {1, 5};  // 5 is not in the delta's set
  CHECK_THROWS_AS(mask_delta(d, outside), ContractError);

  ClientMask misshapen = cm;
  misshapen.shift.m = kM + 1;
  CHECK_THROWS_AS(mask_delta(d, misshapen), ShapeError);
}

TEST_CASE("zero stddev masks are a bitwise no-op") {
  RngStream rng(902);
  const std::vector<int> ids{0, 1};
  const Sketch sk = make_sketch({0, 2, 5});
  MaskSet ms = derive_masks(ids, {sk, sk}, kM, kN, 0.0, 7, 1);
  SparseDelta d = make_delta(0, {0, 2, 5}, rng);
  SparseDelta masked = mask_delta(d, ms.per_client[0]);
  CHECK(masked.b_cols == d.b_cols);
  CHECK(masked.a_rows == d.a_rows);
}

// ============================================================================
// Aggregation
// ============================================================================

TEST_CASE("masks telescope away in the aggregate but hide each upload") {
  RngStream rng(903);
  const std::vector<int> ids{0, 1, 2};
  const std::vector<Sketch> sketches{make_sketch({0, 1, 3}), make_sketch({1, 3, 5}),
                                     make_sketch({0, 3, 5})};
  std::vector<SparseDelta> plain{make_delta(0, {0, 1, 3}, rng), make_delta(1, {1, 3, 5}, rng),
                                 make_delta(2, {0, 3, 5}, rng)};

  MaskSet ms = derive_masks(ids, sketches, kM, kN, 10.0, 1234, 9);
  std::vector<SparseDelta> masked;
  for (size_t t = 0; t < 3; ++t) masked.push_back(mask_delta(plain[t], ms.per_client[t]));

  // Every upload with a live pair mask looks nothing like the plain delta.
  for (size_t t = 0; t < 3; ++t) {
    double moved = 0.0;
    for (size_t x = 0; x < plain[t].b_cols.size(); ++x) {
      moved = std::max(moved, std::fabs(masked[t].b_cols[x] - plain[t].b_cols[x]));
    }
    CHECK(moved > 1.0);
  }

  DenseDelta sum = secure_aggregate(masked, ids, kR);
  DenseDelta want;
  want.db = Matrix(kM, kR);
  want.da = Matrix(kR, kN);
  for (const SparseDelta& d : plain) {
    DenseDelta dd = densify(d);
    add_scaled_inplace(want.db, 1.0, dd.db);
    add_scaled_inplace(want.da, 1.0, dd.da);
  }
  CHECK(max_abs_diff(sum.db, want.db) < 1e-10);
  CHECK(max_abs_diff(sum.da, want.da) < 1e-10);

  // It is a sum, not an average: scaling is the caller's job.
  CHECK(frobenius_norm(sum.db) > 0.0);

  // A missing participant leaves uncancelled masks; refuse to aggregate.
  std::vector<SparseDelta> partial{masked[0], masked[2]};
  CHECK_THROWS_AS(secure_aggregate(partial, ids, kR), ContractError);
  CHECK_THROWS_AS(secure_aggregate({}, {}, kR), ContractError);
}
