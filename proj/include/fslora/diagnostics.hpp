#pragma once

#include <cstdint>
#include <vector>

#include "fslora/federation.hpp"
#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/tasks.hpp"

namespace fslora {

// Empirical estimators for the constants the convergence analysis leans on:
// stochastic-gradient norm bands, variance and dissimilarity proxies, and
// the smoothness inflation caused by sketching. Everything here is a
// diagnostic measurement, not an asserted truth about the task.

struct NormBand {
  double min_norm = 0.0;
  double max_norm = 0.0;
};

// Expected sketched stochastic-gradient norm, averaged over (batch, sketch)
// draws, at `states` independent adapter initializations (b = 0, fresh
// Gaussian a per state); reports the min/max across states. A task whose
// base already interpolates the data yields a zero band.
NormBand grad_norm_stats(const Matrix& w0, const Dataset& data, const Shard& shard, size_t rank,
                         uint32_t k, int states, int samples_per_state, int batch_size,
                         RngStream& rng);

// sup over probe pairs of ||grad f(X) - grad f(Y)|| / ||X - Y|| where grad f
// is the sketch-expectation gradient (Monte Carlo over mc_draws sketches,
// shared between the two ends of a pair), divided by the same sup computed
// with the identity sketch. Probe displacements alternate between full
// Gaussian directions and single-column/row axis directions; a zero
// displacement is skipped and counted in *skipped. The batch argument
// selects the sample subset (empty = the whole dataset).
double smoothness_ratio_probe(const Matrix& w0, const Dataset& data,
                              const std::vector<uint32_t>& batch, size_t rank, uint32_t k,
                              int probes, int mc_draws, RngStream& rng, int* skipped = nullptr);

// Ordinary least squares y ~ intercept + slope * x. All x equal fits a flat
// line at the mean.
struct FitResult {
  double intercept = 0.0;
  double slope = 0.0;
};
FitResult fit_affine(const std::vector<double>& xs, const std::vector<double>& ys);

struct DiagnosticsOptions {
  int states = 8;             // adapter states sampled along a short run
  int samples_per_state = 128;
  int probes = 12;            // probe pairs per smoothness estimate
  int mc_draws = 256;         // sketch draws per Monte Carlo expectation
  int batch_size = 8;         // minibatch size for stochastic draws
  std::vector<uint32_t> probe_ks;  // empty -> {r/4, r/2, r} clamped to >= 1
  uint64_t seed = 1;
};

struct AssumptionEstimates {
  std::vector<NormBand> client_norms;  // one band per client
  double sigma_sq = 0.0;               // variance fit: intercept
  double rho = 0.0;                    // variance fit: slope
  double c_h = 0.0;                    // dissimilarity fit: sqrt(slope)
  double delta_h = 0.0;                // dissimilarity fit: sqrt(intercept)
  std::vector<uint32_t> ks;            // probed sketch sizes
  std::vector<double> smoothness_ratios;  // aligned with ks
};

// Samples `states` global adapter states along a short FSLoRA run of the
// given setup, then estimates, per client, the norm band; across states, the
// variance proxy (squared deviation of stochastic gradients against squared
// expectation-gradient norm) and the dissimilarity proxy (mean per-client
// squared norm against global squared norm), each as an affine fit with
// negative coefficients clamped to zero; and the smoothness ratios for the
// probe k values. Deterministic per (setup, options).
AssumptionEstimates estimate_assumptions(const ExperimentSetup& setup,
                                         const DiagnosticsOptions& opt);

}  // namespace fslora
