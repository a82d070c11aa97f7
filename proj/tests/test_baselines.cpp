#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "fslora/baselines.hpp"
#include "fslora/costs.hpp"
#include "fslora/errors.hpp"
#include "fslora/federation.hpp"
#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/svd.hpp"
#include "fslora/tasks.hpp"

using namespace fslora;

namespace {

Matrix from_rows(size_t m, size_t n, std::vector<double> v) {
  Matrix out(m, n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out(i, j) = v[i * n + j];
  return out;
}

AdapterPair random_pair(size_t m, size_t n, size_t r, RngStream& rng) {
  AdapterPair p;
  p.b = gaussian_matrix(m, r, 0.5, rng);
  p.a = gaussian_matrix(r, n, 0.5, rng);
  return p;
}

ExperimentSetup mini_setup(Method method, uint64_t seed, uint32_t k) {
  TaskSpec spec;
  spec.kind = TaskKind::LeastSquares;
  spec.m = 6;
  spec.n = 7;
  spec.true_rank = 2;
  spec.sample_count = 48;
  spec.noise_stddev = 0.05;
  spec.seed = seed;

  RngStream harness(seed);
  RngStream task_rng = harness.derive("task");
  RngStream eval_rng = harness.derive("eval");
  RngStream part_rng = harness.derive("partition");

  ExperimentSetup s;
  s.method = method;
  s.train = generate_task(spec, task_rng);
  s.eval = resample_dataset(s.train, 32, eval_rng);
  s.shards = dirichlet_partition(s.train, 3, 1.0, part_rng);
  s.rank = 4;
  s.master_seed = seed;
  s.rounds = 3;
  for (int c = 0; c < 3; ++c) {
    ClientConfig cfg;
    cfg.id = c;
    cfg.k_schedule = KSchedule::constant(k);
    cfg.shard = s.shards[static_cast<size_t>(c)];
    cfg.local_steps = 2;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 4;
    s.clients.push_back(cfg);
  }
  return s;
}

}  // namespace

// ============================================================================
// HeteroLoRA
// ============================================================================

TEST_CASE("heterolora truncation keeps the leading columns and rows") {
  AdapterPair g;
  g.b = from_rows(2, 3, {1, 2, 3, 4, 5, 6});
  g.a = from_rows(3, 2, {7, 8, 9, 10, 11, 12});

  AdapterPair t = heterolora_truncate(g, 2);
  CHECK(t.b == from_rows(2, 2, {1, 2, 4, 5}));
  CHECK(t.a == from_rows(2, 2, {7, 8, 9, 10}));

  AdapterPair same = heterolora_truncate(g, 3);
  CHECK(same.b == g.b);
  CHECK(same.a == g.a);

  CHECK_THROWS_AS(heterolora_truncate(g, 0), RangeError);
  CHECK_THROWS_AS(heterolora_truncate(g, 4), RangeError);
}

TEST_CASE("heterolora aggregation zero-pads then averages") {
  AdapterPair low;  // rank 1
  low.b = from_rows(2, 1, {1, 2});
  low.a = from_rows(1, 2, {3, 4});
  AdapterPair high;  // rank 2
  high.b = from_rows(2, 2, {5, 6, 7, 8});
  high.a = from_rows(2, 2, {9, 10, 11, 12});

  AdapterPair avg = heterolora_aggregate(2, {low, high});
  CHECK(avg.b == from_rows(2, 2, {3.0, 3.0, 4.5, 4.0}));
  CHECK(avg.a == from_rows(2, 2, {6.0, 7.0, 5.5, 6.0}));

  // Averaging a single full-rank local is the identity.
  AdapterPair solo = heterolora_aggregate(2, {high});
  CHECK(solo.b == high.b);
  CHECK(solo.a == high.a);

  CHECK_THROWS_AS(heterolora_aggregate(2, {}), ContractError);
  AdapterPair wide;
  wide.b = from_rows(2, 3, {0, 0, 0, 0, 0, 0});
  wide.a = from_rows(3, 2, {0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(heterolora_aggregate(2, {wide}), RangeError);  // rank 3 > 2
  AdapterPair tall;
  tall.b = from_rows(3, 1, {0, 0, 0});
  tall.a = from_rows(1, 2, {0, 0});
  CHECK_THROWS_AS(heterolora_aggregate(2, {low, tall}), ShapeError);
}

// ============================================================================
// FlexLoRA
// ============================================================================

TEST_CASE("flexlora averages products and redistributes truncated factors") {
  RngStream rng(801);
  const size_t m = 5, n = 4;
  std::vector<AdapterPair> locals{random_pair(m, n, 3, rng), random_pair(m, n, 3, rng)};

  // Product-only form: empty rank list skips the redistribution.
  FlexloraResult prod_only = flexlora_aggregate(locals, {});
  CHECK(prod_only.pairs.empty());
  Matrix want = matmul(locals[0].b, locals[0].a);
  add_scaled_inplace(want, 1.0, matmul(locals[1].b, locals[1].a));
  want = scale(0.5, want);
  CHECK(prod_only.product == want);

  FlexloraResult res = flexlora_aggregate(locals, {1, 3});
  CHECK(res.product == want);
  REQUIRE(res.pairs.size() == 2);
  for (size_t c = 0; c < 2; ++c) {
    const uint32_t kc = c == 0 ? 1 : 3;
    const SvdResult sv = truncated_svd(res.product, kc);
    Matrix want_b(m, kc);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < kc; ++j) want_b(i, j) = sv.u(i, j) * sv.s[j];
    CHECK(res.pairs[c].b == want_b);
    CHECK(res.pairs[c].a == transpose(sv.v));
    // The redistributed pair is the best rank-k approximation of the product.
    const double resid = frobenius_norm_sq(sub(res.product, matmul(res.pairs[c].b, res.pairs[c].a)));
    const SvdResult full = truncated_svd(res.product, std::min(m, n));
    double tail = 0.0;
    for (size_t j = kc; j < full.s.size(); ++j) tail += full.s[j] * full.s[j];
    CHECK(resid == doctest::Approx(tail).epsilon(1e-10));
  }

  CHECK_THROWS_AS(flexlora_aggregate({}, {}), ContractError);
  CHECK_THROWS_AS(flexlora_aggregate(locals, {1}), ShapeError);
  std::vector<AdapterPair> mixed{locals[0], random_pair(m + 1, n, 3, rng)};
  CHECK_THROWS_AS(flexlora_aggregate(mixed, {}), ShapeError);
}

// ============================================================================
// FLoRA
// ============================================================================

TEST_CASE("flora merge folds the stacked average into the base") {
  Matrix base = Matrix::identity(2);
  AdapterPair c0, c1;
  c0.b = from_rows(2, 1, {1, 0});
  c0.a = from_rows(1, 2, {2, 3});
  c1.b = from_rows(2, 1, {0, 1});
  c1.a = from_rows(1, 2, {4, 5});

  Matrix merged = flora_merge(base, {c0, c1});
  CHECK(merged == from_rows(2, 2, {2.0, 1.5, 2.0, 3.5}));

  // Stacking is exactly the sum of per-client products.
  Matrix zero_base(2, 2);
  Matrix stacked = flora_merge(zero_base, {c0, c1});
  Matrix sum = matmul(c0.b, c0.a);
  add_scaled_inplace(sum, 1.0, matmul(c1.b, c1.a));
  CHECK(stacked == scale(0.5, sum));

  CHECK_THROWS_AS(flora_merge(base, {}), ContractError);
  AdapterPair bad;
  bad.b = from_rows(3, 1, {0, 0, 0});
  bad.a = from_rows(1, 2, {0, 0});
  CHECK_THROWS_AS(flora_merge(base, {bad}), ShapeError);
}

TEST_CASE("flora reinit draws one derived stream per client slot") {
  RngStream rng(802);
  std::vector<AdapterPair> fresh = flora_reinit({2, 3}, 4, 5, rng);
  REQUIRE(fresh.size() == 2);
  CHECK(fresh[0].b == Matrix(4, 2));  // all zero
  CHECK(fresh[1].b == Matrix(4, 3));
  RngStream s0 = rng.derive(uint64_t{0});
  RngStream s1 = rng.derive(uint64_t{1});
  CHECK(fresh[0].a == gaussian_matrix(2, 5, 1.0 / 2.0, s0));
  CHECK(fresh[1].a == gaussian_matrix(3, 5, 1.0 / 3.0, s1));

  // flora_round keeps the effective weight equal to the merged base.
  Matrix base(4, 5);
  for (size_t i = 0; i < 4; ++i) base(i, i) = 1.0;
  AdapterPair c0;
  RngStream prng(803);
  c0.b = gaussian_matrix(4, 2, 0.4, prng);
  c0.a = gaussian_matrix(2, 5, 0.4, prng);
  RngStream rrng(804);
  FloraRoundResult round = flora_round(base, {c0}, {2}, rrng);
  CHECK(round.merged_base == flora_merge(base, {c0}));
  REQUIRE(round.fresh.size() == 1);
  CHECK(round.fresh[0].b == Matrix(4, 2));
  Matrix effective = round.merged_base;
  add_scaled_inplace(effective, 1.0, matmul(round.fresh[0].b, round.fresh[0].a));
  CHECK(effective == round.merged_base);
}

// ============================================================================
// Top-k upload compression
// ============================================================================

namespace {

SparseDelta payload_delta(std::vector<double> b_cols, std::vector<double> a_rows) {
  SparseDelta d;
  d.client_id = 3;
  d.round = 7;
  d.r = 2;
  d.m = b_cols.size();
  d.n = a_rows.size();
  d.indices = {0};
  d.b_cols = std::move(b_cols);
  d.a_rows = std::move(a_rows);
  return d;
}

}  // namespace

TEST_CASE("topk keeps the largest magnitudes and zeroes the rest") {
  SparseDelta d = payload_delta({3.0, -5.0}, {1.0, 0.0});

  SparseDelta half = topk_compress(d, 0.5);
  CHECK(half.client_id == 3);
  CHECK(half.round == 7);
  CHECK(half.indices == d.indices);
  CHECK(half.b_cols == std::vector<double>{3.0, -5.0});
  CHECK(half.a_rows == std::vector<double>{0.0, 0.0});

  // ceil(0.3 * 4) = 2 entries survive.
  CHECK(topk_payload_indices(d, 0.3).size() == 2);
  CHECK(topk_payload_indices(d, 0.3) == std::vector<uint32_t>{0, 1});

  // Ties break toward the lower flat index: three entries share |2|.
  SparseDelta tie = payload_delta({2.0, -2.0}, {2.0, 0.0});
  SparseDelta kept = topk_compress(tie, 0.5);
  CHECK(kept.b_cols == std::vector<double>{2.0, -2.0});
  CHECK(kept.a_rows == std::vector<double>{0.0, 0.0});

  SparseDelta full = topk_compress(d, 1.0);
  CHECK(full.b_cols == d.b_cols);
  CHECK(full.a_rows == d.a_rows);

  CHECK_THROWS_AS(topk_compress(d, 0.0), RangeError);
  CHECK_THROWS_AS(topk_compress(d, 1.5), RangeError);
  CHECK_THROWS_AS(topk_compress(d, -0.25), RangeError);
}

// ============================================================================
// Runners
// ============================================================================

TEST_CASE("run_baseline rejects fslora-only features on other methods") {
  ExperimentSetup topk = mini_setup(Method::FedLoRA, 810, 4);
  topk.topk_ratio = 0.5;
  CHECK_THROWS_AS(run_baseline(topk), ConfigError);

  ExperimentSetup sec = mini_setup(Method::HeteroLoRA, 811, 2);
  sec.secure = true;
  CHECK_THROWS_AS(run_baseline(sec), ConfigError);

  ExperimentSetup sel = mini_setup(Method::FLoRA, 812, 2);
  sel.selector = SketchSelector::ImportanceNormProduct;
  CHECK_THROWS_AS(run_baseline(sel), ConfigError);
}

TEST_CASE("every runner emits the shared metrics schema with exact wire sizes") {
  const uint64_t bytes_mn = 4u * (6u + 7u);  // one rank unit on the wire
  struct Case {
    Method method;
    uint32_t k;
    uint64_t uplink;    // per round, all three clients
    uint64_t downlink;  // per round broadcast
  };
  const std::vector<Case> cases{
      {Method::FedLoRA, 4, 3 * 4 * bytes_mn, 4 * bytes_mn},
      {Method::HeteroLoRA, 2, 3 * 2 * bytes_mn, 4 * bytes_mn},
      {Method::FlexLoRA, 2, 3 * 2 * bytes_mn, 4 * bytes_mn},
      {Method::FLoRA, 2, 3 * 2 * bytes_mn, 3 * 2 * bytes_mn},
  };
  for (const Case& c : cases) {
    CAPTURE(method_name(c.method));
    ExperimentSetup s = mini_setup(c.method, 813, c.k);
    std::vector<RoundMetrics> streamed;
    RunResult res = run_baseline(s, [&](const RoundMetrics& row) { streamed.push_back(row); });
    REQUIRE(res.rounds.size() == 3);
    REQUIRE(streamed.size() == 3);
    for (size_t t = 0; t < 3; ++t) {
      const RoundMetrics& row = res.rounds[t];
      CHECK(row.round == static_cast<long>(t));
      CHECK(std::isfinite(row.train_loss));
      CHECK(std::isfinite(row.eval_loss));
      CHECK(std::isfinite(row.grad_norm));
      CHECK(row.uplink_bytes == c.uplink);
      CHECK(row.downlink_bytes == c.downlink);
      CHECK(streamed[t].eval_loss == row.eval_loss);
    }
    if (c.method == Method::FLoRA) {
      REQUIRE(res.merged_base.has_value());
      CHECK(res.merged_base->rows() == 6);
      CHECK(res.merged_base->cols() == 7);
      CHECK(res.final_state.adapters.b == Matrix(6, 4));
      CHECK(res.final_state.adapters.a == Matrix(4, 7));
      // The merged base carries everything the run learned.
      const double merged_loss = loss_only(*res.merged_base, s.eval, [&] {
        std::vector<uint32_t> all(s.eval.size());
        for (uint32_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
      }());
      CHECK(merged_loss == doctest::Approx(res.rounds.back().eval_loss).epsilon(1e-12));
    } else {
      CHECK_FALSE(res.merged_base.has_value());
      CHECK(res.final_state.adapters.b.rows() == 6);
      CHECK(res.final_state.adapters.b.cols() == 4);
      CHECK(res.final_state.adapters.a.rows() == 4);
      CHECK(res.final_state.adapters.a.cols() == 7);
    }

    // Same seed, same bytes: the run replays bit for bit.
    RunResult again = run_baseline(s);
    for (size_t t = 0; t < 3; ++t) {
      CHECK(again.rounds[t].train_loss == res.rounds[t].train_loss);
      CHECK(again.rounds[t].eval_loss == res.rounds[t].eval_loss);
      CHECK(again.rounds[t].grad_norm == res.rounds[t].grad_norm);
    }
  }
}

TEST_CASE("fedlora and full-sketch fslora walk the same trajectory") {
  ExperimentSetup fed = mini_setup(Method::FedLoRA, 814, 4);
  fed.rounds = 5;
  ExperimentSetup fs = fed;
  fs.method = Method::FSLoRA;

  RunResult a = run_baseline(fed);
  RunResult b = run_baseline(fs);  // dispatches to run_experiment
  CHECK(a.final_state.adapters.b == b.final_state.adapters.b);
  CHECK(a.final_state.adapters.a == b.final_state.adapters.a);
  for (size_t t = 0; t < 5; ++t) {
    CHECK(a.rounds[t].train_loss == b.rounds[t].train_loss);
    CHECK(a.rounds[t].eval_loss == b.rounds[t].eval_loss);
    CHECK(a.rounds[t].uplink_bytes == b.rounds[t].uplink_bytes);
  }
}
