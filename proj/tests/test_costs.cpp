#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fslora/costs.hpp"
#include "fslora/errors.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"

using namespace fslora;

namespace {

// m = 3, n = 5, r = 4, clients at k = {2, 4}, H = 6, f32 wire.
CostParams params() {
  CostParams p;
  p.m = 3;
  p.n = 5;
  p.r = 4;
  p.k = {2, 4};
  p.local_steps = 6;
  return p;
}

std::vector<uint8_t> f32_bytes(const std::vector<double>& values) {
  std::vector<uint8_t> out;
  for (double v : values) {
    const float f = static_cast<float>(v);
    uint8_t b[4];
    std::memcpy(b, &f, 4);
    out.insert(out.end(), b, b + 4);
  }
  return out;
}

}  // namespace

// ============================================================================
// Method names
// ============================================================================

TEST_CASE("method names round-trip") {
  for (Method m : {Method::FedLoRA, Method::HeteroLoRA, Method::FlexLoRA, Method::FLoRA,
                   Method::FSLoRA}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK(std::string(method_name(Method::FSLoRA)) == "fslora");
  CHECK_THROWS_AS(parse_method("lora"), ConfigError);
  CHECK_THROWS_AS(parse_method(""), ConfigError);
}

// ============================================================================
// Parameter validation and the basic quantities
// ============================================================================

TEST_CASE("cost parameters validate and expose q and the base size") {
  CostParams p = params();
  CHECK_NOTHROW(p.validate());
  CHECK(p.clients() == 2);
  CHECK(p.adapter_pair_bytes() == 4u * 4u * (3u + 5u));  // 128
  CHECK(p.base_bytes() == 4u * 3u * 5u);                 // 60

  auto expect_bad = [&](auto&& mutate) {
    CostParams bad = params();
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  };
  expect_bad([](CostParams& b) { b.m = 0; });
  expect_bad([](CostParams& b) { b.n = 0; });
  expect_bad([](CostParams& b) { b.r = 0; });
  expect_bad([](CostParams& b) { b.k.clear(); });
  expect_bad([](CostParams& b) { b.k = {0}; });
  expect_bad([](CostParams& b) { b.k = {5}; });  // above r = 4
  expect_bad([](CostParams& b) { b.bytes_per_param = 0; });
}

// ============================================================================
// Uplink
// ============================================================================

TEST_CASE("uplink charges the full pair to fedlora and k_i rank units to the rest") {
  CostParams p = params();

  // FedLoRA pays q for every client, even the k = 2 one.
  CHECK(uplink_bytes(p, Method::FedLoRA, 0) == 128);
  CHECK(uplink_bytes(p, Method::FedLoRA, 1) == 128);

  // (k_i / r) * q collapses to 4 * k_i * (m + n).
  for (Method m : {Method::HeteroLoRA, Method::FlexLoRA, Method::FLoRA, Method::FSLoRA}) {
    CHECK(uplink_bytes(p, m, 0) == 4u * 2u * 8u);  // 64
    CHECK(uplink_bytes(p, m, 1) == 4u * 4u * 8u);  // 128
  }

  // Top-k shrinks fslora only: payload 16 scalars at k = 2, keep ceil(8) = 8,
  // plus a 2-byte bitmap.
  CHECK(uplink_bytes(p, Method::FSLoRA, 0, 0.5) == 4u * 8u + 2u);
  // ceil(0.3 * 16) = 5 kept.
  CHECK(uplink_bytes(p, Method::FSLoRA, 0, 0.3) == 4u * 5u + 2u);
  CHECK(uplink_bytes(p, Method::FSLoRA, 0, 1.0) == 64);
  // Other methods ignore the ratio (it is validated all the same).
  CHECK(uplink_bytes(p, Method::HeteroLoRA, 0, 0.5) == 64);

  CHECK_THROWS_AS(uplink_bytes(p, Method::FSLoRA, 2), RangeError);
  CHECK_THROWS_AS(uplink_bytes(p, Method::FSLoRA, 0, 0.0), RangeError);
  CHECK_THROWS_AS(uplink_bytes(p, Method::FSLoRA, 0, 1.5), RangeError);
}

TEST_CASE("downlink broadcasts one pair, a stack, or a pair plus bitmaps") {
  CostParams p = params();
  const std::vector<int> both{0, 1};

  for (Method m : {Method::FedLoRA, Method::HeteroLoRA, Method::FlexLoRA}) {
    CHECK(downlink_bytes(p, m, both) == 128);
  }
  // FLoRA ships the stacked concatenation: (2 + 4) rank units.
  CHECK(downlink_bytes(p, Method::FLoRA, both) == 4u * 6u * 8u);
  CHECK(downlink_bytes(p, Method::FLoRA, {0}) == 4u * 2u * 8u);
  // FSLoRA adds ceil(r / 8) = 1 byte of sketch indices per participant.
  CHECK(downlink_bytes(p, Method::FSLoRA, both) == 128u + 2u);
  CHECK(downlink_bytes(p, Method::FSLoRA, {1}) == 128u + 1u);

  CostParams wide = params();
  wide.r = 9;  // bitmap now 2 bytes
  wide.k = {9, 9};
  CHECK(downlink_bytes(wide, Method::FSLoRA, both) == 4u * 9u * 8u + 2u * 2u);

  CHECK_THROWS_AS(downlink_bytes(p, Method::FLoRA, {0, 5}), RangeError);
}

TEST_CASE("headline sizes: a 66M-parameter pair and a hundred r=64 bitmaps") {
  CostParams big;
  big.m = 2064384;
  big.n = 2064384;
  big.r = 16;
  big.k = {16};
  CHECK(uint64_t{big.r} * (big.m + big.n) == 66060288ull);
  CHECK(uplink_bytes(big, Method::FedLoRA, 0) == 252ull * 1048576ull);  // 252 MB

  CostParams idx;
  idx.m = 256;
  idx.n = 256;
  idx.r = 64;
  idx.k.assign(100, 64);
  std::vector<int> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[i] = i;
  CHECK(downlink_bytes(idx, Method::FSLoRA, hundred) - idx.adapter_pair_bytes() == 800ull);
}

// ============================================================================
// Client compute and memory
// ============================================================================

TEST_CASE("client costs follow the per-method memory and flop shapes") {
  CostParams p = params();
  const uint64_t base = 60, q = 128;

  ClientCost fed = client_costs(p, Method::FedLoRA, 0);
  CHECK(fed.memory_bytes == base + q);
  CHECK(fed.flops == 6u * 4u * 8u);  // H * r * (m + n)

  for (Method m : {Method::HeteroLoRA, Method::FlexLoRA, Method::FSLoRA}) {
    ClientCost low = client_costs(p, m, 0);
    CHECK(low.memory_bytes == base + 4u * 2u * 8u);
    CHECK(low.flops == 6u * 2u * 8u);  // H * k_0 * (m + n)
    ClientCost high = client_costs(p, m, 1);
    CHECK(high.memory_bytes == base + 4u * 4u * 8u);
    CHECK(high.flops == 6u * 4u * 8u);
  }

  // FLoRA holds the stacked pair (or at least another base-sized buffer) and
  // pays for the merge: H*k*(m+n) + sum_k*m*n + m*n.
  ClientCost flora = client_costs(p, Method::FLoRA, 0);
  const uint64_t stacked = 4u * (2u + 4u) * 8u;  // 192 > base
  CHECK(flora.memory_bytes == base + stacked);
  CHECK(flora.flops == 6u * 2u * 8u + 6u * 15u + 15u);

  CostParams tiny = params();
  tiny.k = {1, 1};  // stacked (64) < base (60 -> max picks 64); shrink further
  tiny.m = 10;
  tiny.n = 10;
  tiny.r = 2;
  ClientCost floor = client_costs(tiny, Method::FLoRA, 0);
  // stacked = 4 * 2 * 20 = 160 vs base 400: the base-sized buffer wins.
  CHECK(floor.memory_bytes == 400u + 400u);

  CHECK_THROWS_AS(client_costs(p, Method::FSLoRA, 7), RangeError);
}

// ============================================================================
// Wire encodings
// ============================================================================

namespace {

SparseDelta wire_delta() {
  // r = 3, two kept indices, m = 2, n = 3: payload is 10 scalars.
  SparseDelta d;
  d.client_id = 1;
  d.round = 2;
  d.r = 3;
  d.m = 2;
  d.n = 3;
  d.indices = {0, 2};
  d.b_cols = {1.0, -2.5, 3.25, 0.5};                  // two columns of 2
  d.a_rows = {7.0, -8.0, 9.0, 0.125, 11.0, -12.0};    // two rows of 3
  return d;
}

}  // namespace

TEST_CASE("uncompressed delta wire is f32 payload in b-then-a order") {
  SparseDelta d = wire_delta();
  std::vector<uint8_t> wire = encode_delta_wire(d, false, 1.0);
  CHECK(wire == f32_bytes({1.0, -2.5, 3.25, 0.5, 7.0, -8.0, 9.0, 0.125, 11.0, -12.0}));
}

TEST_CASE("compressed delta wire is a payload bitmap plus kept f32 values") {
  SparseDelta d = wire_delta();

  // Magnitudes: 1, 2.5, 3.25, 0.5 | 7, 8, 9, 0.125, 11, 12. Keep ceil(0.5*10)
  // = 5: flats {9, 8, 5, 6, 4} -> sorted {4, 5, 6, 8, 9}, all on the a side.
  std::vector<uint32_t> kept = topk_payload_indices(d, 0.5);
  CHECK(kept == std::vector<uint32_t>{4, 5, 6, 8, 9});

  std::vector<uint8_t> wire = encode_delta_wire(d, true, 0.5);
  std::vector<uint8_t> want{0b01110000, 0b00000011};  // bits 4,5,6 then 8,9
  std::vector<uint8_t> vals = f32_bytes({7.0, -8.0, 9.0, 11.0, -12.0});
  want.insert(want.end(), vals.begin(), vals.end());
  CHECK(wire == want);

  // Ties break toward the lower flat index: all-equal magnitudes keep a prefix.
  SparseDelta flat = wire_delta();
  flat.b_cols = {2.0, 2.0, 2.0, 2.0};
  flat.a_rows = {2.0, 2.0, 2.0, 2.0, 2.0, 2.0};
  CHECK(topk_payload_indices(flat, 0.2) == std::vector<uint32_t>{0, 1});

  CHECK_THROWS_AS(topk_payload_indices(d, 0.0), RangeError);
  CHECK_THROWS_AS(topk_payload_indices(d, 1.0001), RangeError);
}

TEST_CASE("adapter wire is b then a, row-major, f32") {
  AdapterPair p;
  p.b = Matrix(2, 2);
  p.b(0, 0) = 1.5;
  p.b(0, 1) = -2.0;
  p.b(1, 0) = 0.25;
  p.b(1, 1) = 4.0;
  p.a = Matrix(2, 1);
  p.a(0, 0) = -5.5;
  p.a(1, 0) = 6.0;
  CHECK(encode_adapter_wire(p) == f32_bytes({1.5, -2.0, 0.25, 4.0, -5.5, 6.0}));
}
