#include "fslora/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fslora/errors.hpp"
#include "fslora/lora.hpp"
#include "fslora/sketch.hpp"

namespace fslora {

namespace {

double pair_norm_sq(const Matrix& b, const Matrix& a) {
  return frobenius_norm_sq(b) + frobenius_norm_sq(a);
}

// Gradient of the sketched objective at (b, a): forward through w0 + b S a,
// then the chain rule back onto the pair.
AdapterGrads sketched_grad(const Matrix& w0, const AdapterPair& ad, const Sketch& s,
                           const Dataset& data, const std::vector<uint32_t>& batch) {
  Matrix w = add(w0, matmul(apply_right(ad.b, s), ad.a));
  LossGrad lg = loss_and_weight_grad(w, data, batch);
  return adapter_grads(lg.g, ad, s);
}

// Monte Carlo mean of the sketched gradient over the given sketch draws.
AdapterGrads mean_grad_over_sketches(const Matrix& w0, const AdapterPair& ad,
                                     const std::vector<Sketch>& draws, const Dataset& data,
                                     const std::vector<uint32_t>& batch) {
  AdapterGrads acc;
  acc.gb = Matrix(ad.b.rows(), ad.b.cols());
  acc.ga = Matrix(ad.a.rows(), ad.a.cols());
  for (const Sketch& s : draws) {
    AdapterGrads g = sketched_grad(w0, ad, s, data, batch);
    add_scaled_inplace(acc.gb, 1.0, g.gb);
    add_scaled_inplace(acc.ga, 1.0, g.ga);
  }
  const double inv = 1.0 / static_cast<double>(draws.size());
  acc.gb = scale(inv, acc.gb);
  acc.ga = scale(inv, acc.ga);
  return acc;
}

std::vector<uint32_t> all_rows(const Dataset& d) {
  std::vector<uint32_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0u);
  return idx;
}

}  // namespace

NormBand grad_norm_stats(const Matrix& w0, const Dataset& data, const Shard& shard, size_t rank,
                         uint32_t k, int states, int samples_per_state, int batch_size,
                         RngStream& rng) {
  if (states < 1 || samples_per_state < 1 || batch_size < 1) {
    throw RangeError("grad_norm_stats: counts must be >= 1");
  }
  if (shard.indexes.empty()) throw RangeError("grad_norm_stats: empty shard");
  const size_t m = w0.rows();
  const size_t n = w0.cols();
  NormBand band;
  for (int s = 0; s < states; ++s) {
    RngStream state_rng = rng.derive("state").derive(static_cast<uint64_t>(s));
    AdapterPair ad = init_adapters(m, n, rank, state_rng);
    RngStream draw_rng = rng.derive("draws").derive(static_cast<uint64_t>(s));
    double sum = 0.0;
    std::vector<uint32_t> batch(static_cast<size_t>(batch_size));
    for (int d = 0; d < samples_per_state; ++d) {
      Sketch sk = sample_random_k(SketchSpec{static_cast<uint32_t>(rank), k}, draw_rng);
      for (auto& slot : batch) {
        slot = shard.indexes[draw_rng.next_below(shard.indexes.size())];
      }
      AdapterGrads g = sketched_grad(w0, ad, sk, data, batch);
      sum += std::sqrt(pair_norm_sq(g.gb, g.ga));
    }
    const double expected = sum / static_cast<double>(samples_per_state);
    if (s == 0) {
      band.min_norm = band.max_norm = expected;
    } else {
      band.min_norm = std::min(band.min_norm, expected);
      band.max_norm = std::max(band.max_norm, expected);
    }
  }
  if (!std::isfinite(band.min_norm) || !std::isfinite(band.max_norm)) {
    throw NumericalError("grad_norm_stats: non-finite norm estimate");
  }
  return band;
}

double smoothness_ratio_probe(const Matrix& w0, const Dataset& data,
                              const std::vector<uint32_t>& batch, size_t rank, uint32_t k,
                              int probes, int mc_draws, RngStream& rng, int* skipped) {
  if (probes < 1 || mc_draws < 1) throw RangeError("smoothness_ratio_probe: counts must be >= 1");
  if (k < 1 || k > rank) throw RangeError("smoothness_ratio_probe: k outside [1, rank]");
  const size_t m = w0.rows();
  const size_t n = w0.cols();
  const uint32_t r = static_cast<uint32_t>(rank);
  const std::vector<uint32_t> rows = batch.empty() ? all_rows(data) : batch;
  const Sketch full = Sketch::full(r);
  const double point_stddev = 1.0 / static_cast<double>(rank);
  const double step = 0.5;

  double sup_sketched = 0.0;
  double sup_identity = 0.0;
  int skipped_local = 0;
  for (int p = 0; p < probes; ++p) {
    RngStream pr = rng.derive("probe").derive(static_cast<uint64_t>(p));
    AdapterPair x;
    RngStream xb = pr.derive("xb");
    RngStream xa = pr.derive("xa");
    x.b = gaussian_matrix(m, r, point_stddev, xb);
    x.a = gaussian_matrix(r, n, point_stddev, xa);

    Matrix db(m, r);
    Matrix da(r, n);
    RngStream dir = pr.derive("dir");
    switch (p % 3) {
      case 0:
        db = gaussian_matrix(m, r, point_stddev, dir);
        da = gaussian_matrix(r, n, point_stddev, dir);
        break;
      case 1: {
        const size_t j = static_cast<size_t>(p / 3) % rank;
        for (size_t i = 0; i < m; ++i) db.at(i, j) = point_stddev * dir.next_gaussian();
        break;
      }
      case 2: {
        const size_t j = static_cast<size_t>(p / 3) % rank;
        for (size_t i = 0; i < n; ++i) da.at(j, i) = point_stddev * dir.next_gaussian();
        break;
      }
    }
    const double dir_norm = std::sqrt(pair_norm_sq(db, da));
    if (dir_norm == 0.0) {
      ++skipped_local;
      continue;
    }
    AdapterPair y = x;
    add_scaled_inplace(y.b, step, db);
    add_scaled_inplace(y.a, step, da);
    Matrix diff_b = sub(y.b, x.b);
    Matrix diff_a = sub(y.a, x.a);
    const double displacement = std::sqrt(pair_norm_sq(diff_b, diff_a));
    if (displacement == 0.0) {
      ++skipped_local;
      continue;
    }

    RngStream sk_rng = pr.derive("sketches");
    std::vector<Sketch> draws;
    draws.reserve(static_cast<size_t>(mc_draws));
    for (int d = 0; d < mc_draws; ++d) {
      draws.push_back(sample_random_k(SketchSpec{r, k}, sk_rng));
    }
    AdapterGrads gx = mean_grad_over_sketches(w0, x, draws, data, rows);
    AdapterGrads gy = mean_grad_over_sketches(w0, y, draws, data, rows);
    const double q_sk =
        std::sqrt(pair_norm_sq(sub(gx.gb, gy.gb), sub(gx.ga, gy.ga))) / displacement;
    sup_sketched = std::max(sup_sketched, q_sk);

    AdapterGrads ix = sketched_grad(w0, x, full, data, rows);
    AdapterGrads iy = sketched_grad(w0, y, full, data, rows);
    const double q_id =
        std::sqrt(pair_norm_sq(sub(ix.gb, iy.gb), sub(ix.ga, iy.ga))) / displacement;
    sup_identity = std::max(sup_identity, q_id);
  }
  if (skipped) *skipped = skipped_local;
  if (sup_identity == 0.0) {
    throw NumericalError("smoothness_ratio_probe: flat probe surface (identity sup is zero)");
  }
  const double ratio = sup_sketched / sup_identity;
  if (!std::isfinite(ratio)) throw NumericalError("smoothness_ratio_probe: non-finite ratio");
  return ratio;
}

FitResult fit_affine(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.empty()) {
    throw RangeError("fit_affine: need equally many xs and ys, at least one point");
  }
  const double n = static_cast<double>(xs.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  FitResult fit;
  const double denom = n * sxx - sx * sx;
  // All-equal x values: fall back to a flat line through the mean.
  if (denom <= 1e-14 * std::max(1.0, n * sxx)) {
    fit.slope = 0.0;
    fit.intercept = sy / n;
    return fit;
  }
  fit.slope = (n * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / n;
  return fit;
}

AssumptionEstimates estimate_assumptions(const ExperimentSetup& setup,
                                         const DiagnosticsOptions& opt) {
  if (opt.states < 1 || opt.samples_per_state < 1 || opt.probes < 1 || opt.mc_draws < 1 ||
      opt.batch_size < 1) {
    throw RangeError("estimate_assumptions: counts must be >= 1");
  }
  setup.validate();
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const uint32_t r = static_cast<uint32_t>(setup.rank);
  RngStream root(opt.seed);

  // States along a short run of the actual setup (init state first).
  std::vector<AdapterPair> states;
  {
    RngStream run_root = experiment_root(setup.master_seed);
    RngStream init_rng = init_stream(run_root);
    GlobalState gs;
    gs.base = FrozenBase{setup.train.w0};
    gs.adapters = init_adapters(m, n, setup.rank, init_rng);
    gs.round = 0;
    states.push_back(gs.adapters);
    for (int t = 0; static_cast<int>(states.size()) < opt.states; ++t) {
      RngStream r_rng = round_stream(run_root, t);
      RoundPlan plan = plan_round(gs, setup.clients, setup.participation, setup.selector, r_rng);
      std::vector<SparseDelta> deltas;
      for (size_t slot = 0; slot < plan.participants.size(); ++slot) {
        const int id = plan.participants[slot];
        RngStream b_rng = batch_stream(run_root, id, t);
        deltas.push_back(local_round(gs, setup.train, setup.clients[static_cast<size_t>(id)],
                                     plan.sketches[slot], b_rng, setup.adapter_scale)
                             .delta);
      }
      gs = aggregate(gs, deltas, setup.denominator, setup.clients.size());
      states.push_back(gs.adapters);
    }
  }

  AssumptionEstimates out;

  // Per-client expected-norm bands at the client's round-0 sketch size.
  for (const ClientConfig& cfg : setup.clients) {
    RngStream band_rng = root.derive("norm-band").derive(static_cast<uint64_t>(cfg.id));
    RngStream k_rng = band_rng.derive("ksched");
    const uint32_t k = cfg.k_schedule.k_at(0, k_rng);
    out.client_norms.push_back(grad_norm_stats(setup.train.w0, setup.train, cfg.shard,
                                               setup.rank, k, opt.states, opt.samples_per_state,
                                               opt.batch_size, band_rng));
  }

  // Variance proxy: squared deviation of stochastic draws around the
  // (batch, sketch) mean, against the squared mean norm, pooled over
  // (state, client).
  {
    std::vector<double> xs;
    std::vector<double> ys;
    for (size_t t = 0; t < states.size(); ++t) {
      for (const ClientConfig& cfg : setup.clients) {
        RngStream v_rng = root.derive("variance")
                              .derive(static_cast<uint64_t>(t))
                              .derive(static_cast<uint64_t>(cfg.id));
        RngStream k_rng = v_rng.derive("ksched");
        const uint32_t k = cfg.k_schedule.k_at(static_cast<long>(t), k_rng);
        AdapterGrads mean;
        mean.gb = Matrix(m, r);
        mean.ga = Matrix(r, n);
        double mean_sq = 0.0;
        std::vector<uint32_t> batch(static_cast<size_t>(opt.batch_size));
        for (int d = 0; d < opt.mc_draws; ++d) {
          Sketch sk = sample_random_k(SketchSpec{r, k}, v_rng);
          for (auto& slot : batch) {
            slot = cfg.shard.indexes[v_rng.next_below(cfg.shard.indexes.size())];
          }
          AdapterGrads g = sketched_grad(setup.train.w0, states[t], sk, setup.train, batch);
          mean_sq += pair_norm_sq(g.gb, g.ga);
          add_scaled_inplace(mean.gb, 1.0, g.gb);
          add_scaled_inplace(mean.ga, 1.0, g.ga);
        }
        const double inv = 1.0 / static_cast<double>(opt.mc_draws);
        mean.gb = scale(inv, mean.gb);
        mean.ga = scale(inv, mean.ga);
        mean_sq *= inv;
        const double x = pair_norm_sq(mean.gb, mean.ga);
        xs.push_back(x);
        ys.push_back(std::max(0.0, mean_sq - x));
      }
    }
    FitResult fit = fit_affine(xs, ys);
    out.sigma_sq = std::max(0.0, fit.intercept);
    out.rho = std::max(0.0, fit.slope);
  }

  // Dissimilarity proxy: mean per-client squared expectation-gradient norm
  // against the global squared norm, across states.
  {
    std::vector<double> xs;
    std::vector<double> ys;
    for (size_t t = 0; t < states.size(); ++t) {
      AdapterGrads global;
      global.gb = Matrix(m, r);
      global.ga = Matrix(r, n);
      double client_mean_sq = 0.0;
      for (const ClientConfig& cfg : setup.clients) {
        RngStream h_rng = root.derive("dissimilarity")
                              .derive(static_cast<uint64_t>(t))
                              .derive(static_cast<uint64_t>(cfg.id));
        RngStream k_rng = h_rng.derive("ksched");
        const uint32_t k = cfg.k_schedule.k_at(static_cast<long>(t), k_rng);
        std::vector<Sketch> draws;
        draws.reserve(static_cast<size_t>(opt.mc_draws));
        for (int d = 0; d < opt.mc_draws; ++d) {
          draws.push_back(sample_random_k(SketchSpec{r, k}, h_rng));
        }
        AdapterGrads gi = mean_grad_over_sketches(setup.train.w0, states[t], draws, setup.train,
                                                  cfg.shard.indexes);
        client_mean_sq += pair_norm_sq(gi.gb, gi.ga);
        add_scaled_inplace(global.gb, 1.0, gi.gb);
        add_scaled_inplace(global.ga, 1.0, gi.ga);
      }
      const double inv_n = 1.0 / static_cast<double>(setup.clients.size());
      client_mean_sq *= inv_n;
      global.gb = scale(inv_n, global.gb);
      global.ga = scale(inv_n, global.ga);
      xs.push_back(pair_norm_sq(global.gb, global.ga));
      ys.push_back(client_mean_sq);
    }
    FitResult fit = fit_affine(xs, ys);
    out.c_h = std::sqrt(std::max(0.0, fit.slope));
    out.delta_h = std::sqrt(std::max(0.0, fit.intercept));
  }

  // Smoothness ratios on the pooled task.
  {
    std::vector<uint32_t> ks = opt.probe_ks;
    if (ks.empty()) {
      ks = {std::max(1u, r / 4), std::max(1u, r / 2), r};
      std::sort(ks.begin(), ks.end());
      ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    }
    for (uint32_t k : ks) {
      RngStream p_rng = root.derive("smoothness").derive(static_cast<uint64_t>(k));
      out.ks.push_back(k);
      out.smoothness_ratios.push_back(smoothness_ratio_probe(
          setup.train.w0, setup.train, {}, setup.rank, k, opt.probes, opt.mc_draws, p_rng));
    }
  }

  for (const NormBand& b : out.client_norms) {
    if (b.min_norm < 0.0 || b.max_norm < b.min_norm) {
      throw NumericalError("estimate_assumptions: malformed norm band");
    }
  }
  for (double v : {out.sigma_sq, out.rho, out.c_h, out.delta_h}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw NumericalError("estimate_assumptions: non-finite or negative estimate");
    }
  }
  for (double v : out.smoothness_ratios) {
    if (!std::isfinite(v) || v < 0.0) {
      throw NumericalError("estimate_assumptions: non-finite smoothness ratio");
    }
  }
  return out;
}

}  // namespace fslora
