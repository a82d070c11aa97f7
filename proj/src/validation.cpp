#include "fslora/validation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "fslora/baselines.hpp"
#include "fslora/costs.hpp"
#include "fslora/diagnostics.hpp"
#include "fslora/errors.hpp"
#include "fslora/federation.hpp"
#include "fslora/harness.hpp"
#include "fslora/kernels.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"
#include "fslora/secure_agg.hpp"
#include "fslora/sketch.hpp"
#include "fslora/svd.hpp"
#include "fslora/tasks.hpp"

namespace fslora {

namespace {

// ============================================================================
// Pinned tolerances. Every comparison below references one of these; nothing
// is loosened at the call site.
// ============================================================================

constexpr double kFdStep = 1e-6;          // central-difference step
constexpr double kFdRelTol = 1e-5;        // gradient vs finite differences
constexpr double kFdBudgetMs = 5000.0;    // gradient check wall-clock budget
constexpr double kDiagLo = 0.97;          // mean sketch diagonal band
constexpr double kDiagHi = 1.03;
constexpr double kMcRelTol = 0.02;        // Monte Carlo expectation accuracy
constexpr double kDegenerateTol = 1e-12;  // sketched engine vs plain oracle
constexpr double kTrendBudgetMs = 120000.0;  // ratio-trend wall-clock budget
constexpr double kSecureTol = 1e-10;      // masked vs plain aggregate
constexpr double kFlexTol = 1e-8;         // residual vs tail energy (normalized)
constexpr double kStackTol = 1e-10;       // stacked product vs summed products
constexpr double kMergeTol = 1e-12;       // effective weight across a merge
constexpr double kSmoothHeadroom = 0.10;  // slack over the r/k inflation bound

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// ============================================================================
// The standard scenario: N=10 least-squares clients, m=n=32, r=16, T=200
// rounds. Trend, local-steps, and compression checks all draw from here;
// repeated arms are cached per process so shared baselines run once.
// ============================================================================

ConfigMap standard_config(uint64_t seed, uint32_t k, int local_steps, double topk_ratio) {
  return ConfigMap{
      {"config_version", "1"},
      {"method", "fslora"},
      {"seed", std::to_string(seed)},
      {"task.kind", "least-squares"},
      {"task.m", "32"},
      {"task.n", "32"},
      {"task.true_rank", "4"},
      {"task.samples", "512"},
      {"task.eval_samples", "256"},
      {"task.noise", "0.02"},
      {"partition.clients", "10"},
      {"partition.alpha", "1"},
      {"model.rank", "16"},
      {"clients.k", std::to_string(k)},
      {"federation.rounds", "200"},
      {"federation.local_steps", std::to_string(local_steps)},
      {"federation.lr", fmt("%.17g", kStandardLr)},
      {"federation.batch_size", "8"},
      {"compress.topk_ratio", fmt("%.17g", topk_ratio)},
  };
}

struct ArmSummary {
  std::vector<double> eval_curve;
  std::vector<uint64_t> uplink;
  double final_eval = 0.0;
};

const ArmSummary& standard_run(uint64_t seed, uint32_t k, int local_steps, double topk_ratio) {
  static std::map<std::string, ArmSummary> cache;
  const std::string key = fmt("%llu/%u/%d/%.4f", static_cast<unsigned long long>(seed), k,
                              local_steps, topk_ratio);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  BuiltExperiment built = build_experiment(standard_config(seed, k, local_steps, topk_ratio));
  RunResult res = run_baseline(built.setup);
  ArmSummary s;
  for (const RoundMetrics& r : res.rounds) {
    s.eval_curve.push_back(r.eval_loss);
    s.uplink.push_back(r.uplink_bytes);
  }
  s.final_eval = s.eval_curve.back();
  return cache.emplace(key, std::move(s)).first->second;
}

// ============================================================================
// 1. Adapter gradients vs central finite differences
// ============================================================================

void check_grad_fd(CheckResult& out) {
  const double start = now_ms();
  RngStream rng(20260819);
  double worst = 0.0;
  bool zeros_ok = true;
  for (int cfg = 0; cfg < 20; ++cfg) {
    RngStream dims = rng.derive("dims").derive(static_cast<uint64_t>(cfg));
    const size_t m = 2 + dims.next_below(11);  // 2..12
    const size_t n = 2 + dims.next_below(11);
    const auto r = static_cast<uint32_t>(1 + dims.next_below(8));  // 1..8
    const uint32_t k = cfg % 3 == 0 ? 1 : (cfg % 3 == 1 ? std::max<uint32_t>(1, r / 2) : r);

    TaskSpec ts;
    ts.kind = cfg % 2 == 0 ? TaskKind::LeastSquares : TaskKind::MultinomialLogistic;
    ts.m = m;
    ts.n = n;
    ts.true_rank = 1 + dims.next_below(std::min<uint64_t>({m, n, 4}));
    ts.sample_count = 24;
    ts.noise_stddev = 0.1;
    ts.seed = 77 + static_cast<uint64_t>(cfg);
    RngStream task_rng = rng.derive("task").derive(static_cast<uint64_t>(cfg));
    Dataset data = generate_task(ts, task_rng);
    std::vector<uint32_t> batch(data.size());
    for (uint32_t i = 0; i < batch.size(); ++i) batch[i] = i;

    RngStream ad_rng = rng.derive("adapters").derive(static_cast<uint64_t>(cfg));
    AdapterPair ad = init_adapters(m, n, r, ad_rng);
    ad.b = gaussian_matrix(m, r, 0.5, ad_rng);

    RngStream sk_rng = rng.derive("sketch").derive(static_cast<uint64_t>(cfg));
    const Sketch s = k == r ? Sketch::full(r) : sample_random_k(SketchSpec{r, k}, sk_rng);

    const FrozenBase base{data.w0};
    const LossGrad lg = loss_and_weight_grad(effective_weight(base, ad, s), data, batch);
    const AdapterGrads an = adapter_grads(lg.g, ad, s);

    auto loss_at = [&](const AdapterPair& p) {
      return loss_only(effective_weight(base, p, s), data, batch);
    };
    double num = 0.0, den = 0.0;
    auto probe = [&](Matrix& theta, size_t i, size_t j, double analytic) {
      const double keep = theta(i, j);
      theta(i, j) = keep + kFdStep;
      const double up = loss_at(ad);
      theta(i, j) = keep - kFdStep;
      const double down = loss_at(ad);
      theta(i, j) = keep;
      const double fd = (up - down) / (2.0 * kFdStep);
      num += (fd - analytic) * (fd - analytic);
      den += analytic * analytic;
    };
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < r; ++j) probe(ad.b, i, j, an.gb(i, j));
    }
    for (size_t i = 0; i < r; ++i) {
      for (size_t j = 0; j < n; ++j) probe(ad.a, i, j, an.ga(i, j));
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-12));

    for (uint32_t j = 0; j < r; ++j) {
      if (s.contains(j)) continue;
      for (size_t i = 0; i < m; ++i) zeros_ok &= an.gb(i, j) == 0.0;
      for (size_t t = 0; t < n; ++t) zeros_ok &= an.ga(j, t) == 0.0;
    }
  }
  const double elapsed = now_ms() - start;
  out.pass = worst <= kFdRelTol && zeros_ok && elapsed < kFdBudgetMs;
  out.detail = fmt("20 configs, worst rel err %.2e (tol %.0e), outside-index zeros %s, %.2f s",
                   worst, kFdRelTol, zeros_ok ? "exact" : "VIOLATED", elapsed / 1000.0);
}

// ============================================================================
// 2. Sketch unbiasedness: E[S] = I and E[B S A] = B A
// ============================================================================

void check_sketch_unbiased(CheckResult& out) {
  const uint32_t r = 8, k = 2;
  const size_t m = 6, n = 5;
  const int draws = 100000;
  RngStream rng(4257);
  const Matrix b = gaussian_matrix(m, r, 1.0, rng);
  const Matrix a = gaussian_matrix(r, n, 1.0, rng);
  const Matrix ba = matmul(b, a);

  std::vector<double> diag(r, 0.0);
  Matrix mean(m, n);
  for (int d = 0; d < draws; ++d) {
    const Sketch s = sample_random_k(SketchSpec{r, k}, rng);
    for (uint32_t j : s.indices()) diag[j] += s.sketch_scale();
    add_scaled_inplace(mean, 1.0, matmul(apply_right(b, s), a));
  }
  double lo = 1e300, hi = -1e300;
  for (double& v : diag) {
    v /= draws;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean = scale(1.0 / draws, mean);
  const double rel = frobenius_norm(sub(mean, ba)) / frobenius_norm(ba);
  out.pass = lo >= kDiagLo && hi <= kDiagHi && rel <= kMcRelTol;
  out.detail = fmt("1e5 draws at r=8,k=2: mean diag in [%.4f, %.4f] (band [%.2f, %.2f]), "
                   "product rel err %.4f (tol %.2f)",
                   lo, hi, kDiagLo, kDiagHi, rel, kMcRelTol);
}

// ============================================================================
// 3. Sketch energy bounds: hard per-sample cap, tight expectation
// ============================================================================

void check_sketch_bounds(CheckResult& out) {
  RngStream rng(3141);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    RngStream tr = rng.derive("trial").derive(static_cast<uint64_t>(trial));
    const auto r = static_cast<uint32_t>(2 + tr.next_below(11));  // 2..12
    const auto k = static_cast<uint32_t>(1 + tr.next_below(r));
    const size_t rows = 1 + tr.next_below(8);
    const Matrix x = gaussian_matrix(rows, r, 1.0, tr);
    const Sketch s = sample_random_k(SketchSpec{r, k}, tr);
    const double lhs = frobenius_norm_sq(apply_right(x, s));
    const double cap = std::pow(static_cast<double>(r) / k, 2) * frobenius_norm_sq(x);
    if (lhs > cap) ++violations;
  }

  const uint32_t r = 8, k = 2;
  RngStream mc(2718);
  const Matrix x = gaussian_matrix(7, r, 1.0, mc);
  const int draws = 100000;
  double acc = 0.0;
  for (int d = 0; d < draws; ++d) {
    const Sketch s = sample_random_k(SketchSpec{r, k}, mc);
    acc += frobenius_norm_sq(apply_right(x, s));
  }
  const double target = (static_cast<double>(r) / k) * frobenius_norm_sq(x);
  const double rel = std::fabs(acc / draws - target) / target;
  out.pass = violations == 0 && rel <= kMcRelTol;
  out.detail = fmt("1e3 trials: %d cap violations; 1e5-draw mean energy rel err %.4f (tol %.2f)",
                   violations, rel, kMcRelTol);
}

// ============================================================================
// 4. Full-sketch engine vs the plain oracle, round by round
// ============================================================================

void check_degenerate_equivalence(CheckResult& out) {
  ConfigMap base_cfg{
      {"config_version", "1"},
      {"seed", "11"},
      {"task.kind", "least-squares"},
      {"task.m", "10"},
      {"task.n", "9"},
      {"task.true_rank", "2"},
      {"task.samples", "96"},
      {"task.eval_samples", "64"},
      {"task.noise", "0.05"},
      {"partition.clients", "4"},
      {"partition.alpha", "1"},
      {"model.rank", "4"},
      {"clients.k", "4"},
      {"federation.local_steps", "3"},
      {"federation.lr", "0.02"},
      {"federation.batch_size", "4"},
  };
  const long rounds = 50;
  double worst_state = 0.0;
  double worst_metric = 0.0;
  for (long t = 1; t <= rounds; ++t) {
    ConfigMap ca = base_cfg, cb = base_cfg;
    ca["method"] = "fslora";
    cb["method"] = "fedlora";
    ca["federation.rounds"] = cb["federation.rounds"] = std::to_string(t);
    const RunResult ra = run_baseline(build_experiment(ca).setup);
    const RunResult rb = run_baseline(build_experiment(cb).setup);
    worst_state = std::max({worst_state,
                            max_abs_diff(ra.final_state.adapters.b, rb.final_state.adapters.b),
                            max_abs_diff(ra.final_state.adapters.a, rb.final_state.adapters.a)});
    const RoundMetrics& ma = ra.rounds.back();
    const RoundMetrics& mb = rb.rounds.back();
    worst_metric = std::max({worst_metric, std::fabs(ma.train_loss - mb.train_loss),
                             std::fabs(ma.eval_loss - mb.eval_loss),
                             std::fabs(ma.grad_norm - mb.grad_norm)});
  }
  out.pass = worst_state <= kDegenerateTol && worst_metric <= kDegenerateTol;
  out.detail = fmt("50 rounds at k=r: worst adapter diff %.2e, worst loss/grad diff %.2e "
                   "(tol %.0e)",
                   worst_state, worst_metric, kDegenerateTol);
}

// ============================================================================
// 5. Final loss is monotone in the sketching ratio on the standard scenario
// ============================================================================

void check_ratio_trend(CheckResult& out) {
  const double start = now_ms();
  const uint32_t ks[] = {2, 4, 8, 16};  // ratios 0.125, 0.25, 0.5, 1.0
  double means[4] = {};
  for (int arm = 0; arm < 4; ++arm) {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
      means[arm] += standard_run(seed, ks[arm], 10, 1.0).final_eval;
    }
    means[arm] /= 10.0;
  }
  const double elapsed = now_ms() - start;
  const bool monotone = means[0] >= means[1] && means[1] >= means[2] && means[2] >= means[3];
  out.pass = monotone && elapsed < kTrendBudgetMs;
  out.detail = fmt("10-seed mean final loss: 0.125:%.5g >= 0.25:%.5g >= 0.5:%.5g >= 1.0:%.5g "
                   "%s, %.1f s",
                   means[0], means[1], means[2], means[3],
                   monotone ? "(monotone)" : "(ORDER VIOLATED)", elapsed / 1000.0);
}

// ============================================================================
// 6. More local steps never slow the standard scenario down
// ============================================================================

void check_local_steps_trend(CheckResult& out) {
  const int hs[] = {1, 5, 20};
  long crossing[3] = {};
  for (int arm = 0; arm < 3; ++arm) {
    std::vector<double> avg;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      const ArmSummary& s = standard_run(seed, 16, hs[arm], 1.0);
      if (avg.empty()) avg.assign(s.eval_curve.size(), 0.0);
      for (size_t t = 0; t < avg.size(); ++t) avg[t] += s.eval_curve[t] / 5.0;
    }
    crossing[arm] = static_cast<long>(avg.size()) + 1;
    for (size_t t = 0; t < avg.size(); ++t) {
      if (avg[t] < kTrendLossThreshold) {
        crossing[arm] = static_cast<long>(t) + 1;
        break;
      }
    }
  }
  const bool ordered = crossing[0] >= crossing[1] && crossing[1] >= crossing[2];
  const bool all_cross = crossing[0] <= 200 && crossing[1] <= 200 && crossing[2] <= 200;
  out.pass = ordered && all_cross;
  out.detail = fmt("rounds to loss<%g: H=1:%ld >= H=5:%ld >= H=20:%ld %s", kTrendLossThreshold,
                   crossing[0], crossing[1], crossing[2],
                   ordered && all_cross ? "(non-increasing)" : "(VIOLATED)");
}

// ============================================================================
// 7. Pairwise masks cancel in the aggregate
// ============================================================================

void check_secure_agg(CheckResult& out) {
  RngStream rng(909);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    RngStream tr = rng.derive("trial").derive(static_cast<uint64_t>(trial));
    const int n_clients = trial % 3 == 0 ? 2 : (trial % 3 == 1 ? 5 : 10);
    const auto r = static_cast<uint32_t>(2 + tr.next_below(9));
    const auto m = static_cast<uint32_t>(3 + tr.next_below(10));
    const auto n = static_cast<uint32_t>(3 + tr.next_below(10));
    const double sigma = trial % 5 == 0 ? 4.0 : 1.0;

    std::vector<int> ids;
    std::vector<Sketch> sketches;
    std::vector<SparseDelta> deltas;
    DenseDelta plain{Matrix(m, r), Matrix(r, n)};
    for (int c = 0; c < n_clients; ++c) {
      ids.push_back(c);
      const auto k = static_cast<uint32_t>(1 + tr.next_below(r));
      sketches.push_back(sample_random_k(SketchSpec{r, k}, tr));
      SparseDelta d;
      d.client_id = c;
      d.round = 7;
      d.r = r;
      d.m = m;
      d.n = n;
      d.indices = sketches.back().indices();
      d.b_cols.resize(d.indices.size() * m);
      d.a_rows.resize(d.indices.size() * n);
      for (double& v : d.b_cols) v = tr.next_gaussian();
      for (double& v : d.a_rows) v = tr.next_gaussian();
      const DenseDelta dense = densify(d);
      add_scaled_inplace(plain.db, 1.0, dense.db);
      add_scaled_inplace(plain.da, 1.0, dense.da);
      deltas.push_back(std::move(d));
    }
    const MaskSet masks = derive_masks(ids, sketches, m, n, sigma, tr.next_u64(), 7);
    std::vector<SparseDelta> masked;
    for (int c = 0; c < n_clients; ++c) {
      masked.push_back(mask_delta(deltas[static_cast<size_t>(c)],
                                  masks.per_client[static_cast<size_t>(c)]));
    }
    const DenseDelta agg = secure_aggregate(masked, ids, r);
    worst = std::max({worst, max_abs_diff(agg.db, plain.db), max_abs_diff(agg.da, plain.da)});
  }
  out.pass = worst <= kSecureTol;
  out.detail = fmt("100 configs (N in {2,5,10}): worst masked-vs-plain diff %.2e (tol %.0e)",
                   worst, kSecureTol);
}

// ============================================================================
// 8. Measured wire bytes equal the closed forms
// ============================================================================

void check_cost_reconciliation(CheckResult& out) {
  CostParams p;
  p.m = 24;
  p.n = 17;
  p.r = 8;
  p.k = {8, 5, 3, 1};
  p.local_steps = 2;
  RngStream rng(88);
  const std::vector<int> everyone{0, 1, 2, 3};
  int checked = 0;
  bool ok = true;
  auto expect = [&](uint64_t measured, uint64_t formula) {
    ok &= measured == formula;
    ++checked;
  };

  AdapterPair global;
  global.b = gaussian_matrix(p.m, p.r, 1.0, rng);
  global.a = gaussian_matrix(p.r, p.n, 1.0, rng);

  for (size_t c = 0; c < p.clients(); ++c) {
    const uint32_t kc = p.k[c];
    // FedLoRA ships the full pair regardless of the client.
    expect(encode_adapter_wire(global).size(), uplink_bytes(p, Method::FedLoRA, c));
    // The truncated-pair schemes ship k_c columns/rows.
    AdapterPair local;
    local.b = gaussian_matrix(p.m, kc, 1.0, rng);
    local.a = gaussian_matrix(kc, p.n, 1.0, rng);
    for (Method mth : {Method::HeteroLoRA, Method::FlexLoRA, Method::FLoRA}) {
      expect(encode_adapter_wire(local).size(), uplink_bytes(p, mth, c));
    }
    // FSLoRA ships the sketched delta, optionally top-k compressed.
    const Sketch s = sample_random_k(SketchSpec{static_cast<uint32_t>(p.r), kc}, rng);
    SparseDelta d;
    d.r = static_cast<uint32_t>(p.r);
    d.m = static_cast<uint32_t>(p.m);
    d.n = static_cast<uint32_t>(p.n);
    d.indices = s.indices();
    d.b_cols.resize(d.indices.size() * p.m);
    d.a_rows.resize(d.indices.size() * p.n);
    for (double& v : d.b_cols) v = rng.next_gaussian();
    for (double& v : d.a_rows) v = rng.next_gaussian();
    expect(encode_delta_wire(d, false, 1.0).size(), uplink_bytes(p, Method::FSLoRA, c));
    for (double ratio : {0.5, 0.25}) {
      expect(encode_delta_wire(d, true, ratio).size(),
             uplink_bytes(p, Method::FSLoRA, c, ratio));
    }
    // FSLoRA downlink rides one index bitmap per participant.
    expect(encode_indices(s).size(), (p.r + 7) / 8);
  }

  for (Method mth : {Method::FedLoRA, Method::HeteroLoRA, Method::FlexLoRA}) {
    expect(encode_adapter_wire(global).size(), downlink_bytes(p, mth, everyone));
  }
  uint64_t sum_k = 0;
  for (uint32_t kc : p.k) sum_k += kc;
  AdapterPair stacked;
  stacked.b = Matrix(p.m, sum_k);
  stacked.a = Matrix(sum_k, p.n);
  expect(encode_adapter_wire(stacked).size(), downlink_bytes(p, Method::FLoRA, everyone));
  expect(encode_adapter_wire(global).size() + p.clients() * ((p.r + 7) / 8),
         downlink_bytes(p, Method::FSLoRA, everyone));

  // Headline sizes: a 66,060,288-parameter pair is 252 MB on the wire, and
  // 100 sketch-index bitmaps at r=64 cost 0.78 KB.
  CostParams big;
  big.m = 2064384;
  big.n = 2064384;
  big.r = 16;
  big.k = {16};
  const uint64_t big_params = static_cast<uint64_t>(big.r) * (big.m + big.n);
  const uint64_t big_bytes = uplink_bytes(big, Method::FedLoRA, 0);
  ok &= big_params == 66060288ull;
  ok &= big_bytes == 4ull * big_params;
  ok &= big_bytes == 252ull * 1048576ull;

  CostParams idx;
  idx.m = 256;
  idx.n = 256;
  idx.r = 64;
  idx.k.assign(100, 64);
  std::vector<int> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[i] = i;
  const uint64_t bitmap_total =
      downlink_bytes(idx, Method::FSLoRA, hundred) - idx.adapter_pair_bytes();
  ok &= bitmap_total == 800ull;  // 800 B / 1024 = 0.78 KB
  checked += 5;

  out.pass = ok;
  out.detail = fmt("%d wire-vs-formula equalities%s; 252 MB pair and 0.78 KB bitmap examples %s",
                   checked, ok ? " all exact" : ", MISMATCH",
                   ok ? "reproduce" : "FAIL");
}

// ============================================================================
// 9. Local updates never leak outside the sketch index set
// ============================================================================

void check_sparsity_contract(CheckResult& out) {
  RngStream rng(1337);
  bool ok = true;
  double roundtrip = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    RngStream tr = rng.derive("trial").derive(static_cast<uint64_t>(trial));
    const size_t m = 5 + tr.next_below(8);
    const size_t n = 5 + tr.next_below(8);
    const auto r = static_cast<uint32_t>(2 + tr.next_below(7));
    const auto k = static_cast<uint32_t>(1 + tr.next_below(r));

    TaskSpec ts;
    ts.m = m;
    ts.n = n;
    ts.true_rank = 2;
    ts.sample_count = 48;
    ts.noise_stddev = 0.05;
    ts.seed = 1000 + static_cast<uint64_t>(trial);
    RngStream task_rng = tr.derive("task");
    Dataset data = generate_task(ts, task_rng);
    Shard shard;
    shard.owner = 0;
    shard.indexes.resize(data.size());
    for (uint32_t i = 0; i < shard.indexes.size(); ++i) shard.indexes[i] = i;

    RngStream ad_rng = tr.derive("adapters");
    GlobalState snapshot;
    snapshot.base = FrozenBase{data.w0};
    snapshot.adapters = init_adapters(m, n, r, ad_rng);
    snapshot.adapters.b = gaussian_matrix(m, r, 0.3, ad_rng);
    snapshot.round = 4;

    RngStream sk_rng = tr.derive("sketch");
    const Sketch s = sample_random_k(SketchSpec{r, k}, sk_rng);

    ClientConfig cfg;
    cfg.id = 0;
    cfg.k_schedule = KSchedule::constant(k);
    cfg.shard = shard;
    cfg.local_steps = 5;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 4;

    // Manual trajectory through the public ops, checked step by step.
    RngStream manual_rng = tr.derive("batches");
    RngStream engine_rng = tr.derive("batches");
    AdapterPair pair = snapshot.adapters;
    std::vector<uint32_t> batch(static_cast<size_t>(cfg.batch_size));
    for (int h = 0; h < cfg.local_steps; ++h) {
      for (uint32_t& slot : batch) {
        slot = shard.indexes[manual_rng.next_below(shard.indexes.size())];
      }
      const Matrix w = effective_weight(snapshot.base, pair, s);
      const LossGrad lg = loss_and_weight_grad(w, data, batch);
      const AdapterGrads g = adapter_grads(lg.g, pair, s);
      pair = sgd_step(pair, g, cfg.learning_rate);
      for (uint32_t j = 0; j < r; ++j) {
        if (s.contains(j)) continue;
        for (size_t i = 0; i < m; ++i) ok &= pair.b(i, j) == snapshot.adapters.b(i, j);
        for (size_t t = 0; t < n; ++t) ok &= pair.a(j, t) == snapshot.adapters.a(j, t);
      }
    }

    // The engine's local round reproduces the same delta bit for bit.
    const LocalOutcome engine = local_round(snapshot, data, cfg, s, engine_rng);
    const DenseDelta engine_dense = densify(engine.delta);
    const SparseDelta direct = extract_delta(snapshot.adapters, pair, s);
    const DenseDelta direct_dense = densify(direct);
    ok &= engine_dense.db == direct_dense.db && engine_dense.da == direct_dense.da;

    // Densified round trip equals the dense difference exactly.
    const Matrix diff_b = sub(pair.b, snapshot.adapters.b);
    const Matrix diff_a = sub(pair.a, snapshot.adapters.a);
    ok &= direct_dense.db == diff_b && direct_dense.da == diff_a;
    roundtrip = std::max({roundtrip, max_abs_diff(direct_dense.db, diff_b),
                          max_abs_diff(direct_dense.da, diff_a)});
  }
  out.pass = ok;
  out.detail = fmt("10 local rounds: outside-index entries bit-identical %s, "
                   "densify round-trip max diff %.1e (exact)",
                   ok ? "yes" : "NO", roundtrip);
}

// ============================================================================
// 10. FlexLoRA redistribution hits the truncation optimum
// ============================================================================

void check_flexlora_optimal(CheckResult& out) {
  RngStream rng(515);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    RngStream tr = rng.derive("trial").derive(static_cast<uint64_t>(trial));
    const size_t m = 12 + tr.next_below(10);
    const size_t n = 10 + tr.next_below(8);
    std::vector<AdapterPair> locals;
    uint32_t total_rank = 0;
    for (int c = 0; c < 3; ++c) {
      const auto rc = static_cast<uint32_t>(2 + tr.next_below(3));  // 2..4 -> sum <= 12
      total_rank += rc;
      AdapterPair p;
      p.b = gaussian_matrix(m, rc, 1.0, tr);
      p.a = gaussian_matrix(rc, n, 1.0, tr);
      locals.push_back(std::move(p));
    }
    const auto cap = static_cast<uint32_t>(std::min(m, n));
    // One rank per client: a heterogeneous list plus uniform extremes.
    const std::vector<std::vector<uint32_t>> rank_lists{
        {1, std::min(total_rank / 2, cap), cap},
        {2, 2, 2},
        {std::min(total_rank, cap), std::min(total_rank, cap), std::min(total_rank, cap)}};
    for (const std::vector<uint32_t>& ranks : rank_lists) {
      const FlexloraResult res = flexlora_aggregate(locals, ranks);
      const SvdResult full = truncated_svd(res.product, std::min(m, n));
      const double energy = frobenius_norm_sq(res.product);
      for (size_t c = 0; c < ranks.size(); ++c) {
        double head = 0.0;
        for (size_t j = 0; j < ranks[c]; ++j) head += full.s[j] * full.s[j];
        const double tail = std::max(0.0, energy - head);
        const AdapterPair& p = res.pairs[c];
        const double resid = frobenius_norm_sq(sub(res.product, matmul(p.b, p.a)));
        worst = std::max(worst, std::fabs(resid - tail) / std::max(1.0, energy));
      }
    }
  }
  out.pass = worst <= kFlexTol;
  out.detail = fmt("10 rank-deficient averages x 3 rank lists: worst |residual - tail energy| "
                   "%.2e relative (tol %.0e)",
                   worst, kFlexTol);
}

// ============================================================================
// 11. FLoRA stacking equals the sum of products; merging preserves the model
// ============================================================================

void check_flora_identity(CheckResult& out) {
  RngStream rng(2024);
  double worst_stack = 0.0;
  double worst_merge = 0.0;
  bool fresh_zero = true;
  for (int trial = 0; trial < 8; ++trial) {
    RngStream tr = rng.derive("trial").derive(static_cast<uint64_t>(trial));
    const size_t m = 14, n = 11;
    const int n_clients = trial % 2 == 0 ? 2 : 4;
    std::vector<AdapterPair> locals;
    std::vector<uint32_t> ranks;
    Matrix sum(m, n);
    for (int c = 0; c < n_clients; ++c) {
      const auto rc = static_cast<uint32_t>(1 + tr.next_below(5));
      ranks.push_back(rc);
      AdapterPair p;
      p.b = gaussian_matrix(m, rc, 1.0, tr);
      p.a = gaussian_matrix(rc, n, 1.0, tr);
      add_scaled_inplace(sum, 1.0, matmul(p.b, p.a));
      locals.push_back(std::move(p));
    }
    // Stacked product out of a zero base, rescaled by N.
    const Matrix stacked = scale(static_cast<double>(n_clients),
                                 flora_merge(Matrix(m, n), locals));
    worst_stack = std::max(worst_stack, max_abs_diff(stacked, sum));

    const Matrix base = gaussian_matrix(m, n, 1.0, tr);
    const Matrix merged = flora_merge(base, locals);
    const Matrix expected = add(base, scale(1.0 / n_clients, sum));
    worst_merge = std::max(worst_merge, max_abs_diff(merged, expected));

    RngStream reinit = tr.derive("reinit");
    const FloraRoundResult round = flora_round(base, locals, ranks, reinit);
    for (size_t c = 0; c < round.fresh.size(); ++c) {
      fresh_zero &= round.fresh[c].b == Matrix(m, ranks[c]);
      const Matrix eff = effective_weight(FrozenBase{round.merged_base}, round.fresh[c],
                                          Sketch::full(ranks[c]));
      worst_merge = std::max(worst_merge, max_abs_diff(eff, round.merged_base));
    }
  }
  out.pass = worst_stack <= kStackTol && worst_merge <= kMergeTol && fresh_zero;
  out.detail = fmt("stacked-vs-summed product max diff %.2e (tol %.0e); post-merge effective "
                   "weight max diff %.2e (tol %.0e); fresh b all zero %s",
                   worst_stack, kStackTol, worst_merge, kMergeTol, fresh_zero ? "yes" : "NO");
}

// ============================================================================
// 12. Sketch-expectation smoothness stays under the r/k inflation cap
// ============================================================================

void check_smoothness_bound(CheckResult& out) {
  TaskSpec ts;
  ts.kind = TaskKind::LeastSquares;
  ts.m = 12;
  ts.n = 12;
  ts.true_rank = 3;
  ts.sample_count = 64;
  ts.noise_stddev = 0.1;
  ts.seed = 33;
  RngStream task_rng(606);
  const Dataset data = generate_task(ts, task_rng);
  const size_t rank = 8;
  const uint32_t ks[] = {2, 4, 8};  // r/4, r/2, r
  bool ok = true;
  std::string parts;
  for (uint32_t k : ks) {
    RngStream rng = task_rng.derive("probe").derive(k);
    int skipped = 0;
    const double ratio = smoothness_ratio_probe(data.w0, data, {}, rank, k, 12, 512, rng,
                                                &skipped);
    const double bound = (static_cast<double>(rank) / k) * (1.0 + kSmoothHeadroom);
    ok &= ratio <= bound;
    parts += fmt(" k=%u:%.3f<=%.2f", k, ratio, bound);
  }
  out.pass = ok;
  out.detail = fmt("quadratic task, ratio vs (r/k)(1+%.2f):%s%s", kSmoothHeadroom, parts.c_str(),
                   ok ? "" : " (BOUND EXCEEDED)");
}

// ============================================================================
// 13. Top-k halves the uplink exactly and degrades loss within the pinned cap
// ============================================================================

void check_topk_integration(CheckResult& out) {
  CostParams p;
  p.m = 32;
  p.n = 32;
  p.r = 16;
  p.k.assign(10, 16);
  uint64_t plain_round = 0, topk_round = 0;
  for (size_t c = 0; c < p.clients(); ++c) {
    plain_round += uplink_bytes(p, Method::FSLoRA, c, 1.0);
    topk_round += uplink_bytes(p, Method::FSLoRA, c, 0.5);
  }
  const uint64_t bitmap = 10ull * ((16ull * (32 + 32) + 7) / 8);
  const bool halved = topk_round == plain_round / 2 + bitmap;

  bool wire_exact = true;
  double mean_plain = 0.0, mean_topk = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const ArmSummary& plain = standard_run(seed, 16, 10, 1.0);
    const ArmSummary& compressed = standard_run(seed, 16, 10, 0.5);
    for (uint64_t u : plain.uplink) wire_exact &= u == plain_round;
    for (uint64_t u : compressed.uplink) wire_exact &= u == topk_round;
    mean_plain += plain.final_eval / 5.0;
    mean_topk += compressed.final_eval / 5.0;
  }
  const double factor = mean_topk / mean_plain;
  out.pass = halved && wire_exact && factor <= kTopkLossFactor;
  out.detail = fmt("uplink/round %llu -> %llu (= half + %llu bitmap, measured %s); "
                   "loss %.5g -> %.5g, factor %.3f <= pinned %.2f",
                   static_cast<unsigned long long>(plain_round),
                   static_cast<unsigned long long>(topk_round),
                   static_cast<unsigned long long>(bitmap),
                   wire_exact ? "exact" : "MISMATCH", mean_plain, mean_topk, factor,
                   kTopkLossFactor);
}

// ============================================================================
// 14. A run replayed from its manifest reproduces every artifact byte for byte
// ============================================================================

void check_replay_determinism(CheckResult& out) {
  const std::filesystem::path root = output_root() / "validate-replay";
  std::filesystem::remove_all(root);

  ConfigMap small{
      {"config_version", "1"},
      {"seed", "5"},
      {"task.m", "12"},
      {"task.n", "12"},
      {"task.true_rank", "2"},
      {"task.samples", "96"},
      {"task.eval_samples", "48"},
      {"task.noise", "0.05"},
      {"partition.clients", "3"},
      {"model.rank", "6"},
      {"federation.rounds", "10"},
      {"federation.local_steps", "3"},
      {"federation.lr", "0.02"},
      {"federation.batch_size", "4"},
  };
  std::vector<ConfigMap> configs;
  ConfigMap a = small;
  a["method"] = "fslora";
  a["clients.k"] = "cycle:2,4,6";
  a["compress.topk_ratio"] = "0.5";
  a["secure.enabled"] = "true";
  a["federation.selector"] = "importance_sum";
  configs.push_back(a);
  ConfigMap b = small;
  b["method"] = "flora";
  b["clients.k"] = "4";
  b["federation.rounds"] = "6";
  configs.push_back(b);
  ConfigMap c = small;
  c["method"] = "flexlora";
  c["clients.k"] = "2;3;6";
  c["federation.rounds"] = "6";
  configs.push_back(c);

  bool ok = true;
  int compared = 0;
  for (size_t i = 0; i < configs.size(); ++i) {
    const std::filesystem::path first = root / fmt("first-%zu", i);
    const std::filesystem::path second = root / fmt("second-%zu", i);
    execute_run(configs[i], first);
    const std::string manifest = read_file(run_paths(first).manifest);
    execute_run(manifest_config(manifest), second, manifest_created_utc(manifest));
    for (const char* name : {"manifest.json", "metrics.csv", "adapters.bin"}) {
      ok &= read_file(first / name) == read_file(second / name);
      ++compared;
    }
  }
  out.pass = ok;
  out.detail = fmt("3 methods (fslora+topk+secure, flora, flexlora) replayed from manifests: "
                   "%d/%d artifacts byte-identical",
                   ok ? compared : -1, compared);
}

// ============================================================================
// Module extras (not part of the gate): kernel variants, SVD, dataset I/O
// ============================================================================

void check_kernels_equivalence(CheckResult& out) {
  const kern::Ops& ref = kern::scalar();
  std::vector<const kern::Ops*> others;
  if (kern::avx2()) others.push_back(kern::avx2());
  if (kern::neon()) others.push_back(kern::neon());
  if (others.empty()) {
    out.pass = true;
    out.detail = "only the scalar variant is built on this platform";
    return;
  }
  RngStream rng(7777);
  bool ok = true;
  for (int trial = 0; trial < 40; ++trial) {
    const size_t m = 1 + rng.next_below(17);
    const size_t kk = 1 + rng.next_below(17);
    const size_t n = 1 + rng.next_below(17);
    const Matrix a = gaussian_matrix(m, kk, 1.0, rng);
    const Matrix b = gaussian_matrix(kk, n, 1.0, rng);
    Matrix c_ref(m, n);
    ref.matmul(a.data(), b.data(), c_ref.data(), m, kk, n);
    std::vector<double> x(n), y(n), y2(n);
    for (double& v : x) v = rng.next_gaussian();
    for (size_t i = 0; i < n; ++i) y2[i] = y[i] = rng.next_gaussian();
    for (const kern::Ops* ops : others) {
      Matrix c(m, n);
      ops->matmul(a.data(), b.data(), c.data(), m, kk, n);
      ok &= c == c_ref;
      std::vector<double> ya = y, yb = y2;
      ref.axpy(0.37, x.data(), ya.data(), n);
      ops->axpy(0.37, x.data(), yb.data(), n);
      ok &= ya == yb;
      ref.scale(-1.91, x.data(), ya.data(), n);
      ops->scale(-1.91, x.data(), yb.data(), n);
      ok &= ya == yb;
      ok &= ref.dot(x.data(), y.data(), n) == ops->dot(x.data(), y.data(), n);
      ok &= ref.sum_sq(x.data(), n) == ops->sum_sq(x.data(), n);
    }
  }
  out.pass = ok;
  out.detail = fmt("%zu SIMD variant(s) vs scalar on 40 ragged shapes: %s", others.size(),
                   ok ? "bit-identical" : "DIVERGED");
}

void check_svd_factorization(CheckResult& out) {
  RngStream rng(99);
  double worst = 0.0;
  bool shape_ok = true;
  for (int trial = 0; trial < 6; ++trial) {
    const size_t m = 5 + rng.next_below(8);
    const size_t n = 4 + rng.next_below(8);
    const Matrix a = gaussian_matrix(m, n, 1.0, rng);
    const size_t full = std::min(m, n);
    const SvdResult svd = truncated_svd(a, full);
    Matrix us = svd.u;
    for (size_t i = 0; i < us.rows(); ++i) {
      for (size_t j = 0; j < us.cols(); ++j) us(i, j) *= svd.s[j];
    }
    worst = std::max(worst, max_abs_diff(matmul(us, transpose(svd.v)), a));
    worst = std::max(worst,
                     max_abs_diff(matmul(transpose(svd.u), svd.u), Matrix::identity(full)));
    worst = std::max(worst,
                     max_abs_diff(matmul(transpose(svd.v), svd.v), Matrix::identity(full)));
    for (size_t j = 0; j + 1 < svd.s.size(); ++j) shape_ok &= svd.s[j] >= svd.s[j + 1];
    shape_ok &= svd.s.empty() || svd.s.back() >= 0.0;
  }
  out.pass = worst <= 1e-10 && shape_ok;
  out.detail = fmt("full-rank factorization/orthonormality max diff %.2e (tol 1e-10), "
                   "singular values sorted %s",
                   worst, shape_ok ? "yes" : "NO");
}

void check_dataset_roundtrip(CheckResult& out) {
  TaskSpec ts;
  ts.kind = TaskKind::MultinomialLogistic;
  ts.m = 7;
  ts.n = 9;
  ts.true_rank = 2;
  ts.sample_count = 40;
  ts.noise_stddev = 1.0;
  ts.seed = 4;
  RngStream rng(41);
  const Dataset d = generate_task(ts, rng);
  const std::filesystem::path path = output_root() / "validate-replay" / "dataset.bin";
  std::filesystem::create_directories(path.parent_path());
  export_dataset(d, path.string());
  const Dataset back = import_dataset(path.string());
  const bool ok = back.w0 == d.w0 && back.wstar == d.wstar && back.inputs == d.inputs &&
                  back.targets == d.targets && back.labels == d.labels &&
                  back.spec.kind == d.spec.kind && back.spec.seed == d.spec.seed;
  out.pass = ok;
  out.detail = ok ? "export/import reproduces every field bitwise"
                  : "round-trip DIVERGED";
}

// ============================================================================
// Catalog
// ============================================================================

struct Entry {
  const char* name;
  void (*fn)(CheckResult&);
};

constexpr Entry kGate[] = {
    {"grad-finite-difference", check_grad_fd},
    {"sketch-unbiased", check_sketch_unbiased},
    {"sketch-bounds", check_sketch_bounds},
    {"degenerate-equivalence", check_degenerate_equivalence},
    {"ratio-trend", check_ratio_trend},
    {"local-steps-trend", check_local_steps_trend},
    {"secure-agg-cancellation", check_secure_agg},
    {"costs-reconciliation", check_cost_reconciliation},
    {"sparsity-contract", check_sparsity_contract},
    {"flexlora-truncation-optimal", check_flexlora_optimal},
    {"flora-stacking-identity", check_flora_identity},
    {"smoothness-inflation-bound", check_smoothness_bound},
    {"topk-integration", check_topk_integration},
    {"replay-determinism", check_replay_determinism},
};

constexpr Entry kExtras[] = {
    {"kernels-equivalence", check_kernels_equivalence},
    {"svd-factorization", check_svd_factorization},
    {"dataset-roundtrip", check_dataset_roundtrip},
};

const Entry* find_entry(const std::string& name) {
  for (const Entry& e : kGate) {
    if (name == e.name) return &e;
  }
  for (const Entry& e : kExtras) {
    if (name == e.name) return &e;
  }
  return nullptr;
}

}  // namespace

const std::vector<std::string>& acceptance_check_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const Entry& e : kGate) v.emplace_back(e.name);
    return v;
  }();
  return names;
}

const std::vector<std::string>& all_check_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const Entry& e : kGate) v.emplace_back(e.name);
    for (const Entry& e : kExtras) v.emplace_back(e.name);
    return v;
  }();
  return names;
}

std::vector<CheckResult> run_checks(const std::vector<std::string>& only) {
  std::vector<const Entry*> selected;
  if (only.empty()) {
    for (const std::string& name : all_check_names()) selected.push_back(find_entry(name));
  } else {
    for (const std::string& name : only) {
      const Entry* e = find_entry(name);
      if (!e) throw ConfigError("unknown check '" + name + "'");
      selected.push_back(e);
    }
  }
  std::vector<CheckResult> results;
  for (const Entry* e : selected) {
    CheckResult r;
    r.name = e->name;
    const auto begin = std::chrono::steady_clock::now();
    try {
      e->fn(r);
    } catch (const std::exception& ex) {
      r.pass = false;
      r.detail = std::string("exception: ") + ex.what();
    }
    r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - begin)
               .count();
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace fslora
